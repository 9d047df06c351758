#pragma once

#include "advlab/attacks.hpp"

#include <optional>
#include <utility>

namespace advlab {

/// True iff label ranks among the k highest probabilities; equal
/// probabilities rank by lowest class index.
bool topk_correct(const Prediction& pred, int label, int k);

/// A stored batch of adversarial images tied to test-set ids (one image per
/// id, in id order).
struct AdvSet {
  std::string source;  // row name: generating model or ensemble
  std::string method;  // e.g. "opt_nontargeted"
  std::vector<int> ids;
  std::vector<Image> images;
  std::vector<double> rmsds;

  int size() const { return static_cast<int>(images.size()); }
};

enum class MatrixKind { Accuracy, MatchingRate };

struct TransferMatrix {
  MatrixKind kind = MatrixKind::Accuracy;
  int k = 1;
  std::vector<std::string> sources;
  std::vector<std::string> evaluators;
  VecD mean_rmsd;  // per source row, recomputed from the stored images
  MatD cells;      // percent over the test set
};

/// Accuracy kind scores each cell against the ground truth; matching-rate
/// kind scores against the per-example target label. Every adversarial set
/// must carry exactly the test set's ids, in order.
TransferMatrix transfer_matrix(const std::vector<AdvSet>& adv_sets,
                               const std::vector<LabeledExample>& test_examples,
                               const std::vector<int>& test_ids,
                               const std::vector<const Model*>& evaluators,
                               MatrixKind kind, int k, int threads = 1);

/// Among images misclassified by both models, the percentage on which the
/// two predictions agree. Empty when the denominator is zero.
std::optional<double> same_mistake(const AdvSet& adv,
                                   const std::vector<LabeledExample>& examples,
                                   const Model& a, const Model& b);

/// Distribution over predicted labels restricted to misclassified images,
/// sorted by percentage descending (label ascending on ties).
std::vector<std::pair<int, double>> wrong_label_histogram(
    const AdvSet& adv, const std::vector<LabeledExample>& examples,
    const Model& model);

struct NoiseRow {
  double std_dev = 0.0;
  double mean_rmsd = 0.0;
  VecD accuracy_percent;  // per model
};

/// Clipped i.i.d. Gaussian pixel noise at each std; the generator is seeded
/// per (std index, image index, noise index) so results do not depend on
/// evaluation order.
std::vector<NoiseRow> gaussian_baseline(
    const std::vector<const Model*>& models,
    const std::vector<LabeledExample>& test_examples,
    const std::vector<double>& stds, int noises_per_image, int k,
    std::uint64_t seed, int threads = 1);

struct CosineMatrix {
  std::vector<std::string> models;
  MatD mean_cos;      // mean over images of the signed cosine
  MatD mean_abs_cos;  // mean over images of |cosine|
  int excluded = 0;   // images dropped for a zero gradient under some model
};

CosineMatrix cosine_matrix(const std::vector<const Model*>& models,
                           const std::vector<LabeledExample>& test_examples,
                           LossSpec::Kind loss_kind = LossSpec::Kind::Nontargeted);

enum class DirectionKind { FG, FGS };

const char* direction_kind_name(DirectionKind kind);

/// Unit-L2 attack direction of the source model's non-targeted loss at the
/// example: the normalized gradient for FG, the normalized sign vector for
/// FGS.
VecD attack_direction(const Model& source, const LabeledExample& example,
                      DirectionKind kind);

/// Samples x_B = clip(x + B*sqrt(N)*delta) at B = 0, step, 2*step, ...,
/// <= max_b. B is in RMSD units: without clipping, rmsd(x_B, x) == B.
struct DirectionScan {
  VecD delta;  // unit L2
  double step = 0.1;
  double max_b = 120.0;
  std::vector<std::vector<std::uint8_t>> correct;  // [model][sample], top-1

  int samples() const {
    return correct.empty() ? 0 : static_cast<int>(correct.front().size());
  }
  double b_at(int index) const { return step * index; }
};

DirectionScan scan_direction(const std::vector<const Model*>& models,
                             const LabeledExample& example,
                             const VecD& delta_unit, double step, double max_b);

struct MinRmsdResult {
  bool found = false;
  double rmsd = 0.0;  // of the clipped image at the accepted sample
  double b = 0.0;
  int sample_index = -1;
};

/// Linear search (not bisection: adversarial stretches may be disjoint) for
/// the smallest sampled B at which BOTH models misclassify. Requires the
/// clean example to be correctly classified by both.
MinRmsdResult min_transferable_rmsd(const Model& source, const Model& eval,
                                    const LabeledExample& example,
                                    DirectionKind kind, double step = 0.1,
                                    double max_b = 120.0);

struct BInterval {
  double begin = 0.0;
  double end = 0.0;
};

/// Maximal runs of sampled B values at which the evaluating model
/// misclassifies clip(x + B*sqrt(N)*delta_source).
std::vector<BInterval> adversarial_intervals(const Model& source,
                                             const Model& eval,
                                             const LabeledExample& example,
                                             DirectionKind kind,
                                             double step = 0.1,
                                             double max_b = 120.0);

}  // namespace advlab
