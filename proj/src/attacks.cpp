#include "advlab/attacks.hpp"

#include <cmath>

namespace advlab {

namespace {

constexpr double kGradNormFloor = 1e-20;

LossSpec attack_loss(const LabeledExample& example, AttackMode mode) {
  return mode == AttackMode::Nontargeted
             ? LossSpec::nontargeted(example.ground_truth)
             : LossSpec::targeted(example.target_label);
}

/// Unit vector along x_star - x; zero when the points coincide.
VecD distance_direction(const VecF& x_star, const VecF& x, double* norm_out) {
  VecD d = x_star.cast<double>() - x.cast<double>();
  const double n = d.norm();
  if (norm_out) *norm_out = n;
  if (n < kGradNormFloor) return VecD::Zero(d.size());
  return d / n;
}

struct Objective {
  double value = 0.0;
  VecD grad;
};

/// lambda * ||x_star - x|| - l  (non-targeted)  or  + l' (targeted).
Objective opt_objective(const Model& model, const Image& x_star,
                        const Image& original, const AttackSpec& spec,
                        const LabeledExample& example, double* model_loss) {
  const LossSpec loss = attack_loss(example, spec.mode);
  const GradientReport report = input_gradient(model, x_star, loss);
  if (model_loss) *model_loss = report.loss_value;

  Objective obj;
  const double sign = spec.mode == AttackMode::Nontargeted ? -1.0 : 1.0;
  obj.value = sign * report.loss_value;
  obj.grad = sign * report.grad;
  if (spec.lambda != 0.0) {
    double dist = 0.0;
    const VecD u = distance_direction(x_star.pixels, original.pixels, &dist);
    obj.value += spec.lambda * dist;
    obj.grad += spec.lambda * u;
  }
  return obj;
}

Objective band_objective(const Model& model, const Image& x_star,
                         const Image& original, const AttackSpec& spec,
                         const LabeledExample& example, double* model_loss) {
  const GradientReport report = input_gradient(
      model, x_star, LossSpec::nontargeted(example.ground_truth));
  if (model_loss) *model_loss = report.loss_value;

  Objective obj;
  obj.value = -report.loss_value;
  obj.grad = -report.grad;

  double dist = 0.0;
  const VecD u = distance_direction(x_star.pixels, original.pixels, &dist);
  const BandParams& band = spec.band;
  // tau is an RMSD-unit knob; the objective distance d stays raw L2.
  const double tau = band.tau * std::sqrt(static_cast<double>(x_star.size()));
  // ReLU subgradient at the kink (dist == tau) is zero on both sides.
  if (dist < tau) {
    obj.value += band.lambda1 * (tau - dist);
    obj.grad -= band.lambda1 * u;
  } else if (dist > tau) {
    obj.value += band.lambda2 * (dist - tau);
    obj.grad += band.lambda2 * u;
  }
  return obj;
}

template <typename ObjectiveFn>
AdversarialResult run_adam(const Model& model, const LabeledExample& example,
                           const AttackSpec& spec, ObjectiveFn&& objective_at,
                           std::vector<double>* loss_trace) {
  Image x_star = clip(example.image);
  AdamState adam(x_star.pixels.size());

  for (int it = 0; it < spec.iterations; ++it) {
    double model_loss = 0.0;
    const Objective obj = objective_at(x_star, &model_loss);
    if (loss_trace) loss_trace->push_back(model_loss);
    x_star.pixels =
        clipped(x_star.pixels.cast<double>() +
                adam.update(obj.grad, spec.learning_rate))
            .cast<float>();
  }

  double final_model_loss = 0.0;
  const Objective final_obj = objective_at(x_star, &final_model_loss);
  if (loss_trace) loss_trace->push_back(final_model_loss);

  AdversarialResult result;
  result.adv_image = x_star;
  result.rmsd = rmsd(x_star, example.image);
  result.iterations_used = spec.iterations;
  result.source_model = model.name();
  result.final_loss = final_obj.value;
  return result;
}

}  // namespace

const char* attack_method_name(AttackMethod method) {
  switch (method) {
    case AttackMethod::FGS: return "fgs";
    case AttackMethod::FG: return "fg";
    case AttackMethod::OPT: return "opt";
    case AttackMethod::OPT_BAND: return "opt_band";
  }
  return "?";
}

const char* attack_mode_name(AttackMode mode) {
  return mode == AttackMode::Nontargeted ? "nontargeted" : "targeted";
}

void AttackSpec::validate() const {
  if (distortion < 0.0) throw ConfigError("attack distortion B must be >= 0");
  if (iterations < 0) throw ConfigError("attack iterations must be >= 0");
  if (learning_rate <= 0.0) throw ConfigError("learning rate must be > 0");
  if (band.tau < 0.0 || band.lambda1 < 0.0 || band.lambda2 < 0.0)
    throw ConfigError("band parameters must be >= 0");
}

VecD AdamState::update(const VecD& grad, double learning_rate) {
  ++t;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double m_corr = 1.0 - std::pow(beta1, t);
  const double v_corr = 1.0 - std::pow(beta2, t);
  return (-learning_rate) *
         ((m / m_corr).array() / ((v / v_corr).array().sqrt() + eps)).matrix();
}

Image fast_gradient_step(const Image& x, const VecD& grad, AttackMethod method,
                         AttackMode mode, double distortion) {
  if (grad.size() != x.pixels.size())
    throw ShapeError("gradient length does not match the image");
  if (distortion == 0.0) return clip(x);

  VecD dir;
  if (method == AttackMethod::FGS) {
    dir = sign_vector(grad);
  } else if (method == AttackMethod::FG) {
    const double norm = grad.norm();
    if (norm < kGradNormFloor)
      throw DegenerateGradientError(
          "fast gradient attack: gradient norm below 1e-20, the 1-D "
          "subspace is undefined");
    dir = grad / norm;
  } else {
    throw ConfigError("fast_gradient_step expects FGS or FG");
  }

  const double sign = mode == AttackMode::Nontargeted ? 1.0 : -1.0;
  return Image{
      clipped(x.pixels.cast<double>() + (sign * distortion) * dir)
          .cast<float>(),
      x.shape};
}

AdversarialResult fast_gradient_attack(const Model& model,
                                       const LabeledExample& example,
                                       const AttackSpec& spec) {
  spec.validate();
  if (spec.method != AttackMethod::FGS && spec.method != AttackMethod::FG)
    throw ConfigError("fast_gradient_attack expects FGS or FG");

  const LossSpec loss = attack_loss(example, spec.mode);
  const GradientReport report = input_gradient(model, example.image, loss);
  AdversarialResult result;
  result.adv_image = fast_gradient_step(example.image, report.grad,
                                        spec.method, spec.mode,
                                        spec.distortion);
  result.rmsd = rmsd(result.adv_image, example.image);
  result.iterations_used = 1;
  result.source_model = model.name();
  result.final_loss = loss_value(forward(model, result.adv_image), loss);
  return result;
}

AdversarialResult optimization_attack(const Model& model,
                                      const LabeledExample& example,
                                      const AttackSpec& spec,
                                      std::vector<double>* loss_trace) {
  spec.validate();
  return run_adam(
      model, example, spec,
      [&](const Image& x_star, double* model_loss) {
        return opt_objective(model, x_star, example.image, spec, example,
                             model_loss);
      },
      loss_trace);
}

AdversarialResult optimization_attack_band(const Model& model,
                                           const LabeledExample& example,
                                           const AttackSpec& spec) {
  spec.validate();
  if (spec.mode == AttackMode::Targeted)
    throw UnsupportedModeError(
        "the band objective is defined for non-targeted attacks only");
  if (spec.band.tau <= 0.0)
    throw PreconditionError("band objective requires tau > 0");
  return run_adam(
      model, example, spec,
      [&](const Image& x_star, double* model_loss) {
        return band_objective(model, x_star, example.image, spec, example,
                              model_loss);
      },
      nullptr);
}

double calibrate_distortion(const Model& model,
                            const std::vector<LabeledExample>& examples,
                            const AttackSpec& spec, double target_rmsd,
                            double tolerance) {
  if (spec.method != AttackMethod::FGS && spec.method != AttackMethod::FG)
    throw ConfigError("calibrate_distortion expects FGS or FG");
  if (target_rmsd < 0.0) throw PreconditionError("target RMSD must be >= 0");
  if (target_rmsd == 0.0) return 0.0;
  if (examples.empty()) throw PreconditionError("no examples to calibrate on");

  // The direction of each example does not depend on B.
  std::vector<VecD> grads;
  grads.reserve(examples.size());
  for (const auto& e : examples)
    grads.push_back(
        input_gradient(model, e.image, attack_loss(e, spec.mode)).grad);

  auto mean_rmsd_at = [&](double b) {
    double total = 0.0;
    for (size_t i = 0; i < examples.size(); ++i) {
      const Image adv = fast_gradient_step(examples[i].image, grads[i],
                                           spec.method, spec.mode, b);
      total += rmsd(adv, examples[i].image);
    }
    return total / static_cast<double>(examples.size());
  };

  const int n = examples.front().image.size();
  double lo = 0.0;
  double hi = 255.0 * std::sqrt(static_cast<double>(n));
  if (mean_rmsd_at(hi) < target_rmsd - tolerance)
    throw RangeError("target RMSD " + std::to_string(target_rmsd) +
                     " is unreachable within B in [0, 255*sqrt(N)]");

  double best_b = hi;
  double best_gap = std::abs(mean_rmsd_at(hi) - target_rmsd);
  for (int step = 0; step < 80; ++step) {
    const double mid = 0.5 * (lo + hi);
    const double mean = mean_rmsd_at(mid);
    const double gap = std::abs(mean - target_rmsd);
    if (gap < best_gap) {
      best_gap = gap;
      best_b = mid;
    }
    if (gap <= tolerance * 0.25) break;
    (mean < target_rmsd ? lo : hi) = mid;
  }
  if (best_gap > tolerance)
    throw RangeError("calibration stalled " + std::to_string(best_gap) +
                     " away from the target RMSD");
  return best_b;
}

double calibrate_opt_learning_rate(const Model& model,
                                   const std::vector<LabeledExample>& examples,
                                   AttackSpec spec, double target_rmsd,
                                   double tolerance, double lr_lo,
                                   double lr_hi, int threads) {
  if (examples.empty()) throw PreconditionError("no examples to calibrate on");
  if (target_rmsd <= 0.0) throw PreconditionError("target RMSD must be > 0");

  auto mean_rmsd_at = [&](double lr) {
    spec.learning_rate = lr;
    std::vector<double> rmsds(examples.size(), 0.0);
    parallel_for(static_cast<int>(examples.size()), threads, [&](int i) {
      rmsds[static_cast<size_t>(i)] =
          optimization_attack(model, examples[static_cast<size_t>(i)], spec)
              .rmsd;
    });
    double total = 0.0;
    for (double r : rmsds) total += r;
    return total / static_cast<double>(examples.size());
  };

  double lo = lr_lo, hi = lr_hi;
  if (mean_rmsd_at(hi) < target_rmsd - tolerance)
    throw RangeError("target RMSD unreachable at learning rate " +
                     std::to_string(hi));

  double best_lr = hi;
  double best_gap = 1e30;
  for (int step = 0; step < 24; ++step) {
    const double mid = std::sqrt(lo * hi);  // learning rates live on a log scale
    const double mean = mean_rmsd_at(mid);
    const double gap = std::abs(mean - target_rmsd);
    if (gap < best_gap) {
      best_gap = gap;
      best_lr = mid;
    }
    if (gap <= tolerance * 0.5) break;
    (mean < target_rmsd ? lo : hi) = mid;
  }
  if (best_gap > tolerance)
    throw RangeError("learning-rate calibration stalled " +
                     std::to_string(best_gap) + " away from the target RMSD");
  return best_lr;
}

double calibrate_opt_success_rate(const Model& model,
                                  const std::vector<LabeledExample>& examples,
                                  AttackSpec spec, double success_floor,
                                  double lr_lo, double lr_hi, int threads) {
  if (examples.empty()) throw PreconditionError("no examples to calibrate on");

  auto success_at = [&](double lr) {
    spec.learning_rate = lr;
    std::vector<std::uint8_t> hit(examples.size(), 0);
    parallel_for(static_cast<int>(examples.size()), threads, [&](int i) {
      const LabeledExample& e = examples[static_cast<size_t>(i)];
      const AdversarialResult r = optimization_attack(model, e, spec);
      const int pred = forward(model, r.adv_image).top1();
      hit[static_cast<size_t>(i)] =
          spec.mode == AttackMode::Targeted ? pred == e.target_label
                                            : pred != e.ground_truth;
    });
    int n = 0;
    for (std::uint8_t h : hit) n += h;
    return static_cast<double>(n) / static_cast<double>(examples.size());
  };

  // Success is not guaranteed monotone in the rate (large steps overshoot),
  // so walk a geometric ladder and take the smallest rate that clears the
  // floor.
  const int rungs = 16;
  double best_rate = -1.0, best_success = -1.0;
  for (int r = 0; r < rungs; ++r) {
    const double lr =
        lr_lo * std::pow(lr_hi / lr_lo, static_cast<double>(r) / (rungs - 1));
    const double s = success_at(lr);
    if (s > best_success) {
      best_success = s;
      best_rate = lr;
    }
    if (s >= success_floor) return lr;
  }
  throw RangeError("attack success floor " + std::to_string(success_floor) +
                   " unreachable; best " + std::to_string(best_success) +
                   " at learning rate " + std::to_string(best_rate));
}

}  // namespace advlab
