#pragma once

#include "advlab/config.hpp"
#include "advlab/ensemble.hpp"
#include "advlab/evaluation.hpp"
#include "advlab/geometry.hpp"
#include "advlab/serialize.hpp"
#include "advlab/training.hpp"

#include <filesystem>
#include <map>
#include <mutex>

namespace advlab {

/// Serialized writer for experiment artifacts: every output file goes
/// through write() so the manifest can list each one with its checksum.
class OutputSink {
 public:
  explicit OutputSink(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& relative, const std::string& bytes) {
    write_file_bytes(root_ / relative, bytes);
    std::lock_guard<std::mutex> lock(mutex_);
    files_[relative] = crc32_str(bytes);
  }

  std::map<std::string, std::uint32_t> files() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return files_;
  }

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  std::map<std::string, std::uint32_t> files_;
};

// ---- table renderers (CSV, UTF-8, header row) ----
std::string matrix_csv(const TransferMatrix& matrix);
std::string adv_sidecar_csv(const AdvSet& adv);
std::string noise_csv(const std::vector<NoiseRow>& rows,
                      const std::vector<std::string>& model_names);
std::string cosine_csv(const CosineMatrix& matrix, bool absolute);
std::string grid_csv(const Plane& plane, const LabelGrid& grid);
std::string grid_pgm(const LabelGrid& grid, int num_classes);
std::string weight_trace_csv(const WeightTrace& trace,
                             const std::vector<std::string>& member_names);
std::string logit_profile_csv(const LogitProfile& profile);

// ---- artifact io shared by the stages and the CLI ----
struct LoadedModels {
  std::vector<Model> storage;            // attackable models then black box
  std::vector<const Model*> attackable;  // config order
  std::vector<const Model*> all;         // attackable + black box
  const Model* blackbox = nullptr;
};

LoadedModels load_models(const Config& cfg, const std::filesystem::path& root);

void save_testset(OutputSink& sink, const TestSet& set);
TestSet load_testset(const std::filesystem::path& root);

void save_adv_set(OutputSink& sink, const std::string& relative_base,
                  const AdvSet& adv,
                  const std::vector<LabeledExample>& examples, int num_classes,
                  const ImageShape& shape);
AdvSet load_adv_set(const std::filesystem::path& root,
                    const std::string& relative_base, std::string source,
                    std::string method);

// ---- pipeline stages; each reads its inputs from the sink root ----
void stage_gen_data(const Config& cfg, OutputSink& sink);
void stage_train(const Config& cfg, OutputSink& sink);
void stage_select_testset(const Config& cfg, OutputSink& sink);
void stage_attack(const Config& cfg, OutputSink& sink);
void stage_attack_ensemble(const Config& cfg, OutputSink& sink);
void stage_evaluate(const Config& cfg, OutputSink& sink);
void stage_min_rmsd(const Config& cfg, OutputSink& sink);
void stage_intervals(const Config& cfg, OutputSink& sink);
void stage_noise_baseline(const Config& cfg, OutputSink& sink);
void stage_cosine(const Config& cfg, OutputSink& sink);
void stage_plane(const Config& cfg, OutputSink& sink);
void stage_logit_profile(const Config& cfg, OutputSink& sink);

/// Runs every stage in order and writes manifest.json (config hash, seeds,
/// every artifact with its checksum). On a stage error a partial manifest
/// naming the failed stage is written and StageError is thrown.
std::string run_experiment(const Config& cfg);

}  // namespace advlab
