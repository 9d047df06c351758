#pragma once

#include "advlab/dataset.hpp"

#include <filesystem>

namespace advlab {

// Model file (ATLM): magic "ATLM", u16 version, canonical spec text,
// little-endian f32 weights, trailing CRC32 over everything before it.
// Dataset file (ATDS): magic "ATDS", u16 version, u32 count, class count and
// shape, provenance, per-example (label u16, target u16, f32 pixels),
// trailing CRC32.

inline constexpr std::uint16_t kModelFormatVersion = 1;
inline constexpr std::uint16_t kDatasetFormatVersion = 1;

std::string encode_model(const Model& model);
Model decode_model(const std::string& bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

std::string encode_dataset(const Dataset& data);
Dataset decode_dataset(const std::string& bytes);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      const std::string& bytes);

}  // namespace advlab
