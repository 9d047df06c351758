#pragma once

#include "advlab/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace advlab {

/// Experiment settings. The on-disk form is a sectioned key-value text
/// document; unknown sections or keys are hard errors so a stale config
/// cannot silently drift.
struct Config {
  std::uint64_t seed = 42;
  std::string out = "out";
  int threads = 0;  // 0 = hardware concurrency

  struct Data {
    std::string generator = "shapes10";
    int train_count = 2000;  // per-model disjoint split size
    int blackbox_count = 2000;
    int pool_count = 1000;
    double noise_std = 18.0;
  } data;

  // Attackable model registry. Per-model augmentation noise diversifies the
  // functions the models learn.
  struct ModelEntry {
    std::string name;
    std::string arch;
    double augment = 0.0;
  };
  std::vector<ModelEntry> models = {{"dense2", "dense2", 6},
                                    {"dense3", "dense3", 0},
                                    {"conv_small", "conv_small", 8},
                                    {"conv_wide", "conv_wide", 0},
                                    {"conv_deep", "conv_deep", 10}};

  struct Blackbox {
    std::string name = "blackbox";
    std::string arch = "conv_blackbox";
  } blackbox;

  struct Train {
    int epochs = 45;
    int batch = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double floor = 0.95;
    double blackbox_augment = 6.0;
  } train;

  struct Testset {
    int size = 100;
  } testset;

  struct Attack {
    double lambda = 0.0;
    double learning_rate = 4.0;
    int iterations = 100;
    double target_rmsd = 36.0;  // non-targeted mean RMSD matched across sources
    double rmsd_tolerance = 0.5;
    // Targeted runs pick the weakest rate whose own-model matching clears
    // this floor, which keeps the distortion (and morphing) minimal.
    double success_floor = 0.96;
  } attack;

  struct Ensemble {
    double learning_rate = 4.0;           // non-targeted equal-weight runs
    double targeted_learning_rate = 1.0;  // targeted equal-weight runs
    double mw_learning_rate = 5.0;
    double eta = 0.9;
    int iterations = 100;
  } ensemble;

  struct Evaluation {
    std::vector<int> k_depths = {1, 3};
    std::vector<double> noise_stds = {5, 10, 15, 20, 25, 30, 35, 40};
    int noises_per_image = 100;
    double scan_step = 0.1;
    double scan_max_b = 120.0;
    std::string scan_source = "dense2";
    std::string scan_eval = "conv_small";
  } evaluation;

  struct Geometry {
    double zoom_in = 30.0;
    double zoom_out = 100.0;
    int resolution = 201;
    double logit_max_b = 60.0;
    int logit_samples = 61;
  } geometry;

  void validate() const;

  /// Deterministic normalized rendering; its CRC32 is the config hash
  /// recorded in manifests.
  std::string canonical_text() const;
  std::string hash() const;
};

Config parse_config(const std::string& text);
Config load_config(const std::filesystem::path& path);

}  // namespace advlab
