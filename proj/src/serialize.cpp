#include "advlab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace advlab {

namespace {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u16(std::string& out, std::uint16_t v) {
  out.append(reinterpret_cast<const char*>(&v), 2);
}
void put_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), 4);
}
void put_f32(std::string& out, float v) {
  out.append(reinterpret_cast<const char*>(&v), 4);
}

struct Cursor {
  const std::string& bytes;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > bytes.size())
      throw SerializationError(std::string("truncated file while reading ") +
                               what);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + pos, 2);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  float f32(const char* what) {
    need(4, what);
    float v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

void check_envelope(const std::string& bytes, const char* magic,
                    std::uint16_t supported_version, Cursor& cur) {
  cur.need(4, "magic");
  if (bytes.compare(0, 4, magic) != 0)
    throw SerializationError(std::string("not a ") + magic + " file");
  cur.pos = 4;
  const std::uint16_t version = cur.u16("version");
  if (version != supported_version)
    throw SerializationError(std::string(magic) + " format version " +
                             std::to_string(version) + " is not supported " +
                             "(this build reads version " +
                             std::to_string(supported_version) + ")");
  // Trailing CRC32 covers every byte before it.
  if (bytes.size() < 8)
    throw SerializationError("truncated file: missing checksum");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const std::uint32_t actual = crc32_bytes(bytes.data(), bytes.size() - 4);
  if (stored != actual)
    throw SerializationError(std::string(magic) + " checksum mismatch");
}

void seal(std::string& out) { put_u32(out, crc32_bytes(out.data(), out.size())); }

}  // namespace

std::string encode_model(const Model& model) {
  std::string out;
  out.append("ATLM");
  put_u16(out, kModelFormatVersion);
  const std::string spec = model.spec().canonical_text();
  put_u32(out, static_cast<std::uint32_t>(spec.size()));
  out.append(spec);
  const VecF& w = model.weights();
  put_u32(out, static_cast<std::uint32_t>(w.size()));
  for (Eigen::Index i = 0; i < w.size(); ++i) put_f32(out, w[i]);
  seal(out);
  return out;
}

Model decode_model(const std::string& bytes) {
  Cursor cur{bytes};
  check_envelope(bytes, "ATLM", kModelFormatVersion, cur);
  const std::uint32_t spec_len = cur.u32("spec length");
  ModelSpec spec = ModelSpec::parse_canonical(cur.str(spec_len, "spec text"));
  const std::uint32_t count = cur.u32("weight count");
  VecF w(static_cast<Eigen::Index>(count));
  for (std::uint32_t i = 0; i < count; ++i) w[i] = cur.f32("weights");
  if (cur.pos != bytes.size() - 4)
    throw SerializationError("ATLM file has trailing bytes");
  return Model(std::move(spec), std::move(w));
}

std::string encode_dataset(const Dataset& data) {
  data.validate();
  std::string out;
  out.append("ATDS");
  put_u16(out, kDatasetFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(data.examples.size()));
  put_u16(out, static_cast<std::uint16_t>(data.num_classes));
  put_u16(out, static_cast<std::uint16_t>(data.shape.channels));
  put_u16(out, static_cast<std::uint16_t>(data.shape.height));
  put_u16(out, static_cast<std::uint16_t>(data.shape.width));
  put_u16(out, static_cast<std::uint16_t>(data.provenance.size()));
  out.append(data.provenance);
  for (const LabeledExample& e : data.examples) {
    put_u16(out, static_cast<std::uint16_t>(e.ground_truth));
    put_u16(out, static_cast<std::uint16_t>(e.target_label));
    for (Eigen::Index i = 0; i < e.image.pixels.size(); ++i)
      put_f32(out, e.image.pixels[i]);
  }
  seal(out);
  return out;
}

Dataset decode_dataset(const std::string& bytes) {
  Cursor cur{bytes};
  check_envelope(bytes, "ATDS", kDatasetFormatVersion, cur);
  const std::uint32_t count = cur.u32("example count");
  Dataset data;
  data.num_classes = cur.u16("class count");
  data.shape.channels = cur.u16("channels");
  data.shape.height = cur.u16("height");
  data.shape.width = cur.u16("width");
  const std::uint16_t prov_len = cur.u16("provenance length");
  data.provenance = cur.str(prov_len, "provenance");
  const int n = data.shape.size();
  data.examples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    LabeledExample e;
    e.ground_truth = cur.u16("label");
    e.target_label = cur.u16("target label");
    VecF pixels(n);
    for (int j = 0; j < n; ++j) pixels[j] = cur.f32("pixels");
    e.image = make_image(data.shape, std::move(pixels));
    data.examples.push_back(std::move(e));
  }
  if (cur.pos != bytes.size() - 4)
    throw SerializationError("ATDS file has trailing bytes");
  data.validate();
  return data;
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SerializationError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path,
                      const std::string& bytes) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SerializationError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw SerializationError("short write to '" + path.string() + "'");
}

void save_model(const Model& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_model(model));
}

Model load_model(const std::filesystem::path& path) {
  return decode_model(read_file_bytes(path));
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  write_file_bytes(path, encode_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file_bytes(path));
}

}  // namespace advlab
