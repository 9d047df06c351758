#include "advlab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace advlab {

namespace {

void check_adv_set(const AdvSet& adv,
                   const std::vector<LabeledExample>& examples,
                   const std::vector<int>& expected_ids) {
  if (adv.ids != expected_ids)
    throw InvariantError("adversarial set '" + adv.source + "/" + adv.method +
                         "' does not carry the test set's ids");
  if (adv.images.size() != examples.size())
    throw InvariantError("adversarial set '" + adv.source +
                         "' size does not match the test set");
}

}  // namespace

bool topk_correct(const Prediction& pred, int label, int k) {
  const int classes = static_cast<int>(pred.probs.size());
  if (k < 1 || k > classes)
    throw RangeError("top-k depth " + std::to_string(k) + " out of range");
  if (label < 0 || label >= classes)
    throw RangeError("class index " + std::to_string(label) + " out of range");
  const float p = pred.probs[label];
  int rank = 0;
  for (int j = 0; j < classes; ++j) {
    if (pred.probs[j] > p || (pred.probs[j] == p && j < label)) ++rank;
  }
  return rank < k;
}

TransferMatrix transfer_matrix(const std::vector<AdvSet>& adv_sets,
                               const std::vector<LabeledExample>& test_examples,
                               const std::vector<int>& test_ids,
                               const std::vector<const Model*>& evaluators,
                               MatrixKind kind, int k, int threads) {
  if (evaluators.empty()) throw ConfigError("no evaluating models");
  if (test_ids.size() != test_examples.size())
    throw InvariantError("test ids and examples differ in length");
  for (const AdvSet& adv : adv_sets) check_adv_set(adv, test_examples, test_ids);

  TransferMatrix out;
  out.kind = kind;
  out.k = k;
  for (const AdvSet& adv : adv_sets) out.sources.push_back(adv.source);
  for (const Model* m : evaluators) out.evaluators.push_back(m->name());
  out.mean_rmsd = VecD::Zero(static_cast<Eigen::Index>(adv_sets.size()));
  out.cells.setZero(static_cast<Eigen::Index>(adv_sets.size()),
                    static_cast<Eigen::Index>(evaluators.size()));

  parallel_for(static_cast<int>(adv_sets.size()), threads, [&](int row) {
    const AdvSet& adv = adv_sets[static_cast<size_t>(row)];
    const int n = adv.size();
    double rmsd_total = 0.0;
    std::vector<int> hits(evaluators.size(), 0);
    for (int i = 0; i < n; ++i) {
      const LabeledExample& e = test_examples[static_cast<size_t>(i)];
      rmsd_total += rmsd(adv.images[static_cast<size_t>(i)], e.image);
      const int label =
          kind == MatrixKind::Accuracy ? e.ground_truth : e.target_label;
      for (size_t j = 0; j < evaluators.size(); ++j) {
        const Prediction pred =
            forward(*evaluators[j], adv.images[static_cast<size_t>(i)]);
        if (topk_correct(pred, label, k)) ++hits[j];
      }
    }
    out.mean_rmsd[row] = n > 0 ? rmsd_total / n : 0.0;
    for (size_t j = 0; j < evaluators.size(); ++j)
      out.cells(row, static_cast<Eigen::Index>(j)) =
          n > 0 ? 100.0 * hits[j] / n : 0.0;
  });
  return out;
}

std::optional<double> same_mistake(const AdvSet& adv,
                                   const std::vector<LabeledExample>& examples,
                                   const Model& a, const Model& b) {
  if (adv.images.size() != examples.size())
    throw InvariantError("adversarial set size does not match the test set");
  int both_wrong = 0;
  int same_label = 0;
  for (size_t i = 0; i < adv.images.size(); ++i) {
    const int y = examples[i].ground_truth;
    const int pa = forward(a, adv.images[i]).top1();
    const int pb = forward(b, adv.images[i]).top1();
    if (pa != y && pb != y) {
      ++both_wrong;
      if (pa == pb) ++same_label;
    }
  }
  if (both_wrong == 0) return std::nullopt;
  return 100.0 * same_label / both_wrong;
}

std::vector<std::pair<int, double>> wrong_label_histogram(
    const AdvSet& adv, const std::vector<LabeledExample>& examples,
    const Model& model) {
  if (adv.images.size() != examples.size())
    throw InvariantError("adversarial set size does not match the test set");
  std::map<int, int> counts;
  int total = 0;
  for (size_t i = 0; i < adv.images.size(); ++i) {
    const int p = forward(model, adv.images[i]).top1();
    if (p != examples[i].ground_truth) {
      ++counts[p];
      ++total;
    }
  }
  std::vector<std::pair<int, double>> hist;
  hist.reserve(counts.size());
  for (const auto& [label, count] : counts)
    hist.emplace_back(label, 100.0 * count / total);
  std::sort(hist.begin(), hist.end(), [](const auto& x, const auto& y) {
    if (x.second != y.second) return x.second > y.second;
    return x.first < y.first;
  });
  return hist;
}

std::vector<NoiseRow> gaussian_baseline(
    const std::vector<const Model*>& models,
    const std::vector<LabeledExample>& test_examples,
    const std::vector<double>& stds, int noises_per_image, int k,
    std::uint64_t seed, int threads) {
  if (stds.empty()) throw ConfigError("no noise levels given");
  if (noises_per_image < 1)
    throw ConfigError("noises_per_image must be at least 1");

  std::vector<NoiseRow> rows(stds.size());
  for (size_t s = 0; s < stds.size(); ++s) {
    const double std_dev = stds[s];
    const int n = static_cast<int>(test_examples.size());
    std::vector<double> rmsd_by_image(static_cast<size_t>(n), 0.0);
    MatD hits = MatD::Zero(n, static_cast<Eigen::Index>(models.size()));

    parallel_for(n, threads, [&](int i) {
      const LabeledExample& e = test_examples[static_cast<size_t>(i)];
      double rmsd_total = 0.0;
      for (int j = 0; j < noises_per_image; ++j) {
        Rng rng(Rng::mix(Rng::mix(Rng::mix(seed, s), static_cast<std::uint64_t>(i)),
                         static_cast<std::uint64_t>(j)));
        VecF noisy(e.image.pixels.size());
        for (Eigen::Index px = 0; px < noisy.size(); ++px)
          noisy[px] = e.image.pixels[px] +
                      static_cast<float>(rng.normal() * std_dev);
        const Image img{clipped(noisy), e.image.shape};
        rmsd_total += rmsd(img, e.image);
        for (size_t m = 0; m < models.size(); ++m) {
          if (topk_correct(forward(*models[m], img), e.ground_truth, k))
            hits(i, static_cast<Eigen::Index>(m)) += 1.0;
        }
      }
      rmsd_by_image[static_cast<size_t>(i)] = rmsd_total;
    });

    NoiseRow& row = rows[s];
    row.std_dev = std_dev;
    double rmsd_total = 0.0;
    for (double r : rmsd_by_image) rmsd_total += r;
    row.mean_rmsd = rmsd_total / (static_cast<double>(n) * noises_per_image);
    row.accuracy_percent =
        100.0 * hits.colwise().sum() / (static_cast<double>(n) * noises_per_image);
  }
  return rows;
}

CosineMatrix cosine_matrix(const std::vector<const Model*>& models,
                           const std::vector<LabeledExample>& test_examples,
                           LossSpec::Kind loss_kind) {
  if (models.size() < 2) throw ConfigError("cosine matrix needs >= 2 models");
  const size_t k = models.size();
  CosineMatrix out;
  for (const Model* m : models) out.models.push_back(m->name());
  out.mean_cos = MatD::Identity(static_cast<Eigen::Index>(k),
                                static_cast<Eigen::Index>(k));
  out.mean_abs_cos = MatD::Identity(static_cast<Eigen::Index>(k),
                                    static_cast<Eigen::Index>(k));

  MatD sum_cos = MatD::Zero(static_cast<Eigen::Index>(k),
                            static_cast<Eigen::Index>(k));
  MatD sum_abs = sum_cos;
  int included = 0;
  for (const LabeledExample& e : test_examples) {
    std::vector<VecD> unit(k);
    bool degenerate = false;
    for (size_t i = 0; i < k; ++i) {
      const LossSpec loss = loss_kind == LossSpec::Kind::Nontargeted
                                ? LossSpec::nontargeted(e.ground_truth)
                                : LossSpec::targeted(e.target_label);
      VecD g = input_gradient(*models[i], e.image, loss).grad;
      const double norm = g.norm();
      if (norm < 1e-20) {
        degenerate = true;
        break;
      }
      unit[i] = g / norm;
    }
    if (degenerate) {
      ++out.excluded;
      continue;
    }
    ++included;
    for (size_t i = 0; i < k; ++i) {
      for (size_t j = i + 1; j < k; ++j) {
        const double c = unit[i].dot(unit[j]);
        sum_cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += c;
        sum_abs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +=
            std::abs(c);
      }
    }
  }
  if (included == 0) throw PreconditionError("every image had a zero gradient");
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = i + 1; j < k; ++j) {
      const Eigen::Index ii = static_cast<Eigen::Index>(i);
      const Eigen::Index jj = static_cast<Eigen::Index>(j);
      out.mean_cos(ii, jj) = out.mean_cos(jj, ii) = sum_cos(ii, jj) / included;
      out.mean_abs_cos(ii, jj) = out.mean_abs_cos(jj, ii) =
          sum_abs(ii, jj) / included;
    }
  }
  return out;
}

const char* direction_kind_name(DirectionKind kind) {
  return kind == DirectionKind::FG ? "fg" : "fgs";
}

VecD attack_direction(const Model& source, const LabeledExample& example,
                      DirectionKind kind) {
  const VecD grad =
      input_gradient(source, example.image,
                     LossSpec::nontargeted(example.ground_truth))
          .grad;
  VecD dir = kind == DirectionKind::FG ? grad : sign_vector(grad);
  const double norm = dir.norm();
  if (norm < 1e-20)
    throw DegenerateGradientError("direction scan: zero attack direction");
  return dir / norm;
}

DirectionScan scan_direction(const std::vector<const Model*>& models,
                             const LabeledExample& example,
                             const VecD& delta_unit, double step,
                             double max_b) {
  if (step <= 0.0 || max_b < 0.0)
    throw ConfigError("scan needs step > 0 and max_b >= 0");
  if (std::abs(delta_unit.norm() - 1.0) > 1e-9)
    throw PreconditionError("scan direction must be unit length");

  const int samples = static_cast<int>(std::floor(max_b / step + 1e-9)) + 1;
  const double root_n = std::sqrt(static_cast<double>(example.image.size()));
  const VecD scaled = root_n * delta_unit;

  DirectionScan scan;
  scan.delta = delta_unit;
  scan.step = step;
  scan.max_b = max_b;
  scan.correct.assign(models.size(),
                      std::vector<std::uint8_t>(static_cast<size_t>(samples), 0));
  for (int i = 0; i < samples; ++i) {
    const double b = step * i;
    const Image x_b{
        clipped(example.image.pixels.cast<double>() + b * scaled).cast<float>(),
        example.image.shape};
    for (size_t m = 0; m < models.size(); ++m) {
      scan.correct[m][static_cast<size_t>(i)] =
          forward(*models[m], x_b).top1() == example.ground_truth ? 1 : 0;
    }
  }
  return scan;
}

namespace {

void check_clean_correct(const Model& source, const Model& eval,
                         const LabeledExample& example) {
  if (forward(source, example.image).top1() != example.ground_truth ||
      forward(eval, example.image).top1() != example.ground_truth)
    throw PreconditionError(
        "the clean example must be classified correctly by both models");
}

}  // namespace

MinRmsdResult min_transferable_rmsd(const Model& source, const Model& eval,
                                    const LabeledExample& example,
                                    DirectionKind kind, double step,
                                    double max_b) {
  check_clean_correct(source, eval, example);
  const VecD delta = attack_direction(source, example, kind);
  const double root_n = std::sqrt(static_cast<double>(example.image.size()));
  const VecD scaled = root_n * delta;
  const int samples = static_cast<int>(std::floor(max_b / step + 1e-9)) + 1;

  for (int i = 0; i < samples; ++i) {
    const double b = step * i;
    const Image x_b{
        clipped(example.image.pixels.cast<double>() + b * scaled).cast<float>(),
        example.image.shape};
    if (forward(source, x_b).top1() != example.ground_truth &&
        forward(eval, x_b).top1() != example.ground_truth) {
      return {true, rmsd(x_b, example.image), b, i};
    }
  }
  return {};
}

std::vector<BInterval> adversarial_intervals(const Model& source,
                                             const Model& eval,
                                             const LabeledExample& example,
                                             DirectionKind kind, double step,
                                             double max_b) {
  check_clean_correct(source, eval, example);
  const VecD delta = attack_direction(source, example, kind);
  const DirectionScan scan = scan_direction({&eval}, example, delta, step, max_b);
  const auto& bits = scan.correct.front();

  std::vector<BInterval> intervals;
  int run_start = -1;
  for (int i = 0; i < static_cast<int>(bits.size()); ++i) {
    const bool wrong = bits[static_cast<size_t>(i)] == 0;
    if (wrong && run_start < 0) run_start = i;
    if (!wrong && run_start >= 0) {
      intervals.push_back({scan.b_at(run_start), scan.b_at(i - 1)});
      run_start = -1;
    }
  }
  if (run_start >= 0)
    intervals.push_back(
        {scan.b_at(run_start), scan.b_at(static_cast<int>(bits.size()) - 1)});
  return intervals;
}

}  // namespace advlab
