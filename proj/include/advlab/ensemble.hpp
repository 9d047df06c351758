#pragma once

#include "advlab/attacks.hpp"

#include <utility>

namespace advlab {

enum class EnsembleVariant { Equal, Multiplicative };
enum class StepRule { SummedAdam, SignOfGradient };

struct EnsembleSpec {
  std::vector<std::string> members;
  std::vector<double> alpha;  // empty = equal weights 1/k
  AttackMode mode = AttackMode::Nontargeted;
  double learning_rate = 8.0;
  int iterations = 100;
  EnsembleVariant variant = EnsembleVariant::Equal;
  double eta = 0.9;  // multiplicative decay for already-fooled members
  StepRule step_rule = StepRule::SummedAdam;
  double lambda = 0.0;
  double distortion = 0.0;  // B for the ensemble fast-gradient forms
  // Convergence stop for the sign-update loop: halt once the objective has
  // changed by less than flat_tol (relative) for flat_window iterations.
  double flat_tol = 1e-5;
  int flat_window = 8;
  std::uint64_t seed = 0;

  std::vector<double> effective_alpha(std::size_t k) const;
  void validate(std::size_t k, bool require_pair = true) const;
};

/// Per-iteration member weights w_i^{(j)}: row j-1 holds w^{(j)}, starting
/// from w^{(1)} = 1 and multiplying individual entries by eta whenever the
/// member no longer classifies the iterate correctly.
struct WeightTrace {
  MatD w;

  int iterations() const { return static_cast<int>(w.rows()) - 1; }
};

/// The ensemble attack objective: -log(sum_i alpha_i J_i(x)[y_star]) for
/// targeted mode, -log(1 - sum_i alpha_i J_i(x)[y]) for non-targeted mode,
/// plus lambda * ||x - origin|| when lambda is nonzero. Probabilities
/// entering the log are clamped as in the single-model losses.
double ensemble_objective(const std::vector<const Model*>& models,
                          const std::vector<double>& alpha, const Image& image,
                          int label, AttackMode mode, double lambda = 0.0,
                          const Image* origin = nullptr);

/// Gradient of ensemble_objective with respect to the pixels; value_out
/// receives the objective value when non-null.
VecD ensemble_objective_gradient(const std::vector<const Model*>& models,
                                 const std::vector<double>& alpha,
                                 const Image& image, int label, AttackMode mode,
                                 double lambda = 0.0,
                                 const Image* origin = nullptr,
                                 double* value_out = nullptr);

/// Equal-weight ensemble attack: each member keeps its own Adam state fed by
/// the gradient of its own alpha-weighted loss term; the k updates are summed,
/// added to the image, and the iterate is clipped every step.
AdversarialResult ensemble_optimization_attack(
    const std::vector<const Model*>& models, const LabeledExample& example,
    const EnsembleSpec& spec);

/// Multiplicative-weight variant (non-targeted): weights of already-fooled
/// members decay by eta each iteration, the update is learning_rate times the
/// sign of the ensemble-objective gradient, and correctness is judged on the
/// clipped iterate. Fixed-size sign steps do not anneal, so the loop stops
/// early once the objective flatlines; iterations is the budget and
/// iterations_used reports the actual count.
std::pair<AdversarialResult, WeightTrace> ensemble_mw_attack(
    const std::vector<const Model*>& models, const LabeledExample& example,
    const EnsembleSpec& spec);

/// Single gradient evaluation of the ensemble objective; FGS adds B times its
/// sign, FG adds B times its unit direction (targeted forms subtract).
/// A single-member ensemble reduces to the single-model attack.
AdversarialResult ensemble_fast_gradient(const std::vector<const Model*>& models,
                                         const LabeledExample& example,
                                         const EnsembleSpec& spec,
                                         AttackMethod method);

/// Bisects the ensemble fast-gradient B to hit a mean RMSD target; the
/// ensemble gradient of each example is evaluated once and reused.
double calibrate_ensemble_distortion(const std::vector<const Model*>& models,
                                     const std::vector<LabeledExample>& examples,
                                     const EnsembleSpec& spec,
                                     AttackMethod method, double target_rmsd,
                                     double tolerance = 0.5);

}  // namespace advlab
