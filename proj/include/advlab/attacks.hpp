#pragma once

#include "advlab/dataset.hpp"

namespace advlab {

enum class AttackMethod { FGS, FG, OPT, OPT_BAND };
enum class AttackMode { Nontargeted, Targeted };

const char* attack_method_name(AttackMethod method);
const char* attack_mode_name(AttackMode mode);

struct BandParams {
  double tau = 0.0;  // distortion target in RMSD units
  double lambda1 = 0.0;
  double lambda2 = 0.0;
};

struct AttackSpec {
  AttackMethod method = AttackMethod::OPT;
  AttackMode mode = AttackMode::Nontargeted;
  double distortion = 0.0;  // step bound B for the fast-gradient methods
  double lambda = 0.0;      // L2 distance weight in the optimization objective
  double learning_rate = 4.0;
  int iterations = 100;
  BandParams band;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam recurrence with bias correction. update() consumes one gradient and
/// returns the descent step to add to the iterate.
struct AdamState {
  VecD m;
  VecD v;
  int t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(Eigen::Index n) : m(VecD::Zero(n)), v(VecD::Zero(n)) {}
  VecD update(const VecD& grad, double learning_rate);
};

struct AdversarialResult {
  Image adv_image;
  double rmsd = 0.0;
  int iterations_used = 0;
  std::string source_model;
  double final_loss = 0.0;  // attack objective at the returned iterate
};

/// Pure step arithmetic shared by the fast-gradient attacks: clip(x ± B*dir)
/// where dir is sgn(grad) for FGS and grad/||grad|| for FG; non-targeted adds,
/// targeted subtracts. B = 0 returns the clipped original.
Image fast_gradient_step(const Image& x, const VecD& grad, AttackMethod method,
                         AttackMode mode, double distortion);

/// One gradient evaluation, one step.
AdversarialResult fast_gradient_attack(const Model& model,
                                       const LabeledExample& example,
                                       const AttackSpec& spec);

/// Adam on the attack objective, initialized at the original image, clipping
/// to [0, 255] after every step. loss_trace, when given, receives the model
/// loss at each iterate (including the final one).
AdversarialResult optimization_attack(const Model& model,
                                      const LabeledExample& example,
                                      const AttackSpec& spec,
                                      std::vector<double>* loss_trace = nullptr);

/// Variant with a two-sided ReLU band penalty that steers the distortion
/// toward tau. Non-targeted only.
AdversarialResult optimization_attack_band(const Model& model,
                                           const LabeledExample& example,
                                           const AttackSpec& spec);

/// Bisects B so the mean attack RMSD over the examples lands within
/// ±tolerance of target_rmsd (mean RMSD is nondecreasing in B). The gradient
/// direction of each example is evaluated once and reused.
double calibrate_distortion(const Model& model,
                            const std::vector<LabeledExample>& examples,
                            const AttackSpec& spec, double target_rmsd,
                            double tolerance = 0.5);

/// Bisects the Adam learning rate of the optimization attack so the mean
/// RMSD over the examples lands within ±tolerance of target_rmsd. Each probe
/// runs the full attack over the examples.
double calibrate_opt_learning_rate(const Model& model,
                                   const std::vector<LabeledExample>& examples,
                                   AttackSpec spec, double target_rmsd,
                                   double tolerance = 0.5, double lr_lo = 0.125,
                                   double lr_hi = 32.0, int threads = 1);

/// Smallest learning rate whose attack succeeds on the source model for at
/// least success_floor of the examples (top-1 against the attack's own
/// criterion: misclassified for non-targeted, matching the target label for
/// targeted). Keeping the rate minimal keeps the distortion minimal.
double calibrate_opt_success_rate(const Model& model,
                                  const std::vector<LabeledExample>& examples,
                                  AttackSpec spec, double success_floor = 0.97,
                                  double lr_lo = 0.125, double lr_hi = 32.0,
                                  int threads = 1);

}  // namespace advlab
