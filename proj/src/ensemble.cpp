#include "advlab/ensemble.hpp"

#include <cmath>

namespace advlab {

namespace {

double clamp_prob(double p) {
  return std::min(std::max(p, kLogEps), 1.0 - kLogEps);
}

void check_label_space(const std::vector<const Model*>& models, int label) {
  if (models.empty()) throw ConfigError("ensemble has no members");
  const int classes = models.front()->num_classes();
  const ImageShape& shape = models.front()->input_shape();
  for (const Model* m : models) {
    if (m->num_classes() != classes || !(m->input_shape() == shape))
      throw ShapeError("label-space mismatch: model '" + m->name() +
                       "' does not match the ensemble");
  }
  if (label < 0 || label >= classes)
    throw RangeError("class index " + std::to_string(label) + " out of range");
}

std::string joined_names(const std::vector<const Model*>& models) {
  std::string out = "ensemble(";
  for (size_t i = 0; i < models.size(); ++i) {
    if (i) out += "+";
    out += models[i]->name();
  }
  out += ")";
  return out;
}

AdversarialResult finish(const std::vector<const Model*>& models,
                         const std::vector<double>& alpha,
                         const LabeledExample& example, const Image& x_star,
                         const EnsembleSpec& spec, int iterations) {
  const int label = spec.mode == AttackMode::Nontargeted
                        ? example.ground_truth
                        : example.target_label;
  AdversarialResult result;
  result.adv_image = x_star;
  result.rmsd = rmsd(x_star, example.image);
  result.iterations_used = iterations;
  result.source_model = joined_names(models);
  result.final_loss = ensemble_objective(models, alpha, x_star, label,
                                         spec.mode, spec.lambda,
                                         &example.image);
  return result;
}

}  // namespace

std::vector<double> EnsembleSpec::effective_alpha(std::size_t k) const {
  if (alpha.empty())
    return std::vector<double>(k, 1.0 / static_cast<double>(k));
  if (alpha.size() != k)
    throw ConfigError("ensemble has " + std::to_string(k) + " members but " +
                      std::to_string(alpha.size()) + " weights");
  double total = 0.0;
  for (double a : alpha) {
    if (a < 0.0) throw ConfigError("ensemble weights must be >= 0");
    total += a;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("ensemble weights must sum to 1");
  return alpha;
}

void EnsembleSpec::validate(std::size_t k, bool require_pair) const {
  if (require_pair && k < 2)
    throw ConfigError("ensemble attacks need at least 2 members");
  if (k < 1) throw ConfigError("ensemble has no members");
  effective_alpha(k);
  if (eta <= 0.0 || eta > 1.0) throw ConfigError("eta must be in (0, 1]");
  if (learning_rate <= 0.0) throw ConfigError("learning rate must be > 0");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (distortion < 0.0) throw ConfigError("distortion must be >= 0");
}

double ensemble_objective(const std::vector<const Model*>& models,
                          const std::vector<double>& alpha, const Image& image,
                          int label, AttackMode mode, double lambda,
                          const Image* origin) {
  check_label_space(models, label);
  // Double-precision probabilities; float rounding would quantize the
  // objective below the resolution finite differences need.
  double p_bar = 0.0;
  for (size_t i = 0; i < models.size(); ++i)
    p_bar += alpha[i] * forward_trace(*models[i], image).probs[label];
  double value = mode == AttackMode::Targeted
                     ? -std::log(clamp_prob(p_bar))
                     : -std::log(clamp_prob(1.0 - p_bar));
  if (lambda != 0.0 && origin)
    value += lambda * (image.pixels.cast<double>() -
                       origin->pixels.cast<double>())
                          .norm();
  return value;
}

VecD ensemble_objective_gradient(const std::vector<const Model*>& models,
                                 const std::vector<double>& alpha,
                                 const Image& image, int label,
                                 AttackMode mode, double lambda,
                                 const Image* origin, double* value_out) {
  check_label_space(models, label);
  double p_bar = 0.0;
  VecD summed = VecD::Zero(image.pixels.size());
  for (size_t i = 0; i < models.size(); ++i) {
    double p = 0.0;
    summed += alpha[i] * probability_gradient(*models[i], image, label, &p);
    p_bar += alpha[i] * p;
  }
  double value;
  VecD grad;
  if (mode == AttackMode::Targeted) {
    value = -std::log(clamp_prob(p_bar));
    grad = -summed / clamp_prob(p_bar);
  } else {
    value = -std::log(clamp_prob(1.0 - p_bar));
    grad = summed / clamp_prob(1.0 - p_bar);
  }
  if (lambda != 0.0 && origin) {
    VecD d = image.pixels.cast<double>() - origin->pixels.cast<double>();
    const double n = d.norm();
    value += lambda * n;
    if (n > 1e-20) grad += (lambda / n) * d;
  }
  if (value_out) *value_out = value;
  return grad;
}

AdversarialResult ensemble_optimization_attack(
    const std::vector<const Model*>& models, const LabeledExample& example,
    const EnsembleSpec& spec) {
  const size_t k = models.size();
  spec.validate(k);
  const std::vector<double> alpha = spec.effective_alpha(k);
  const int label = spec.mode == AttackMode::Nontargeted
                        ? example.ground_truth
                        : example.target_label;
  check_label_space(models, label);

  Image x_star = clip(example.image);
  std::vector<AdamState> adam(k, AdamState(x_star.pixels.size()));

  for (int it = 0; it < spec.iterations; ++it) {
    VecD summed_update = VecD::Zero(x_star.pixels.size());
    for (size_t i = 0; i < k; ++i) {
      // Model i's own loss term: alpha_i * l'(y*) targeted, or
      // -alpha_i * l(y) non-targeted; the lambda distance share rides along
      // so the summed pre-Adam gradient matches the joint objective.
      const LossSpec loss = spec.mode == AttackMode::Nontargeted
                                ? LossSpec::nontargeted(example.ground_truth)
                                : LossSpec::targeted(example.target_label);
      GradientReport report = input_gradient(*models[i], x_star, loss);
      VecD g = spec.mode == AttackMode::Nontargeted ? VecD(-report.grad)
                                                    : report.grad;
      g *= alpha[i];
      if (spec.lambda != 0.0) {
        VecD d = x_star.pixels.cast<double>() - example.image.pixels.cast<double>();
        const double n = d.norm();
        if (n > 1e-20) g += (alpha[i] * spec.lambda / n) * d;
      }
      summed_update += adam[i].update(g, spec.learning_rate);
    }
    x_star.pixels =
        clipped(x_star.pixels.cast<double>() + summed_update).cast<float>();
  }
  return finish(models, alpha, example, x_star, spec, spec.iterations);
}

std::pair<AdversarialResult, WeightTrace> ensemble_mw_attack(
    const std::vector<const Model*>& models, const LabeledExample& example,
    const EnsembleSpec& spec) {
  const size_t k = models.size();
  spec.validate(k);
  if (spec.mode != AttackMode::Nontargeted)
    throw UnsupportedModeError(
        "the multiplicative-weight attack is non-targeted only");
  check_label_space(models, example.ground_truth);

  Image x_star = clip(example.image);
  VecD w = VecD::Ones(static_cast<Eigen::Index>(k));
  MatD trace_rows(spec.iterations + 1, static_cast<Eigen::Index>(k));
  trace_rows.row(0) = w.transpose();

  // Sign steps never shrink, so unlike the Adam attacks this loop needs an
  // explicit convergence stop: once the ensemble objective flatlines (every
  // member deeply fooled), further iterations only random-walk the iterate.
  const double kFlatTol = spec.flat_tol;
  const int kFlatWindow = spec.flat_window;
  double prev_value = 0.0;
  int flat_run = 0;
  int used = 0;

  std::vector<double> alpha(k, 0.0);
  for (int it = 0; it < spec.iterations; ++it) {
    const double total = w.sum();
    for (size_t i = 0; i < k; ++i) alpha[i] = w[static_cast<Eigen::Index>(i)] / total;

    double value = 0.0;
    const VecD grad = ensemble_objective_gradient(
        models, alpha, x_star, example.ground_truth, AttackMode::Nontargeted,
        spec.lambda, &example.image, &value);
    x_star.pixels = clipped(x_star.pixels.cast<double>() -
                            spec.learning_rate * sign_vector(grad))
                        .cast<float>();

    // Members that are already fooled on the clipped iterate decay.
    for (size_t i = 0; i < k; ++i) {
      if (forward(*models[i], x_star).top1() != example.ground_truth)
        w[static_cast<Eigen::Index>(i)] *= spec.eta;
    }
    trace_rows.row(it + 1) = w.transpose();
    used = it + 1;

    flat_run = (it > 0 && std::abs(value - prev_value) <
                              kFlatTol * std::max(1.0, std::abs(value)))
                   ? flat_run + 1
                   : 0;
    prev_value = value;
    if (flat_run >= kFlatWindow) break;
  }

  WeightTrace trace;
  trace.w = trace_rows.topRows(used + 1);
  const double total = w.sum();
  for (size_t i = 0; i < k; ++i) alpha[i] = w[static_cast<Eigen::Index>(i)] / total;
  return {finish(models, alpha, example, x_star, spec, used),
          std::move(trace)};
}

AdversarialResult ensemble_fast_gradient(
    const std::vector<const Model*>& models, const LabeledExample& example,
    const EnsembleSpec& spec, AttackMethod method) {
  const size_t k = models.size();
  spec.validate(k, /*require_pair=*/false);
  if (method != AttackMethod::FGS && method != AttackMethod::FG)
    throw ConfigError("ensemble_fast_gradient expects FGS or FG");
  const std::vector<double> alpha = spec.effective_alpha(k);
  const int label = spec.mode == AttackMode::Nontargeted
                        ? example.ground_truth
                        : example.target_label;

  const VecD obj_grad = ensemble_objective_gradient(
      models, alpha, example.image, label, spec.mode);
  // fast_gradient_step expects the single-model convention: the gradient of
  // the quantity maximized for non-targeted attacks, minimized for targeted.
  const VecD step_grad =
      spec.mode == AttackMode::Nontargeted ? VecD(-obj_grad) : obj_grad;

  AdversarialResult result;
  result.adv_image = fast_gradient_step(example.image, step_grad, method,
                                        spec.mode, spec.distortion);
  result.rmsd = rmsd(result.adv_image, example.image);
  result.iterations_used = 1;
  result.source_model = joined_names(models);
  result.final_loss = ensemble_objective(models, alpha, result.adv_image,
                                         label, spec.mode);
  return result;
}

double calibrate_ensemble_distortion(const std::vector<const Model*>& models,
                                     const std::vector<LabeledExample>& examples,
                                     const EnsembleSpec& spec,
                                     AttackMethod method, double target_rmsd,
                                     double tolerance) {
  if (examples.empty()) throw PreconditionError("no examples to calibrate on");
  if (target_rmsd < 0.0) throw PreconditionError("target RMSD must be >= 0");
  if (target_rmsd == 0.0) return 0.0;
  const std::vector<double> alpha = spec.effective_alpha(models.size());

  std::vector<VecD> step_grads;
  step_grads.reserve(examples.size());
  for (const auto& e : examples) {
    const int label = spec.mode == AttackMode::Nontargeted ? e.ground_truth
                                                           : e.target_label;
    VecD g = ensemble_objective_gradient(models, alpha, e.image, label,
                                         spec.mode);
    if (spec.mode == AttackMode::Nontargeted) g = -g;
    step_grads.push_back(std::move(g));
  }

  auto mean_rmsd_at = [&](double b) {
    double total = 0.0;
    for (size_t i = 0; i < examples.size(); ++i) {
      const Image adv = fast_gradient_step(examples[i].image, step_grads[i],
                                           method, spec.mode, b);
      total += rmsd(adv, examples[i].image);
    }
    return total / static_cast<double>(examples.size());
  };

  const int n = examples.front().image.size();
  double lo = 0.0;
  double hi = 255.0 * std::sqrt(static_cast<double>(n));
  if (mean_rmsd_at(hi) < target_rmsd - tolerance)
    throw RangeError("ensemble fast-gradient target RMSD unreachable");
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
    throw RangeError("ensemble distortion calibration stalled");
  return best_b;
}

}  // namespace advlab
