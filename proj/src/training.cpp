#include "advlab/training.hpp"

#include <numeric>

namespace advlab {

Model train(const ModelSpec& spec, const Dataset& data,
            const TrainHyperparams& hp) {
  if (data.num_classes != spec.num_classes)
    throw ShapeError("dataset has " + std::to_string(data.num_classes) +
                     " classes but model '" + spec.name + "' expects " +
                     std::to_string(spec.num_classes));
  if (!(data.shape == spec.input))
    throw ShapeError("dataset shape does not match model '" + spec.name + "'");
  if (data.size() < 1) throw ShapeError("empty training dataset");

  const int n = data.size();
  const int batch = std::max(1, std::min(hp.batch_size, n));

  // Master weights and momentum live in double; the forward/backward pass of
  // each batch sees the float32 rounding of the current weights, matching
  // what a saved model would compute.
  VecD master = initial_weights(spec, Rng::mix(hp.seed, 0x1217u))
                    .cast<double>();
  VecD velocity = VecD::Zero(master.size());
  VecD wgrad(master.size());

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    // Step decay settles the oscillation that a constant rate leaves.
    double lr = hp.learning_rate;
    if (epoch >= (hp.epochs * 3) / 5) lr *= 0.3;
    if (epoch >= (hp.epochs * 17) / 20) lr *= 0.3;
    Rng shuffle_rng(Rng::mix(hp.seed, 0xe90c0000u + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    Rng augment_rng(
        Rng::mix(hp.seed, 0xa060000u + static_cast<std::uint64_t>(epoch)));
    for (int start = 0; start < n; start += batch) {
      const int stop = std::min(start + batch, n);
      const Model m(spec, master.cast<float>());
      wgrad.setZero();
      for (int i = start; i < stop; ++i) {
        const LabeledExample& e = data.examples[static_cast<size_t>(order[static_cast<size_t>(i)])];
        Image presented = e.image;
        if (hp.augment_noise > 0.0) {
          for (Eigen::Index px = 0; px < presented.pixels.size(); ++px)
            presented.pixels[px] += static_cast<float>(augment_rng.normal() *
                                                       hp.augment_noise);
          presented = clip(presented);
        }
        const ForwardTrace trace = forward_trace(m, presented);
        const VecD seed =
            loss_logit_gradient(trace.probs, LossSpec::targeted(e.ground_truth));
        backward_from_logits(m, trace, seed, &wgrad);
      }
      wgrad /= static_cast<double>(stop - start);
      velocity = hp.momentum * velocity - lr * wgrad;
      master += velocity;
    }
  }

  Model trained(spec, master.cast<float>());
  const double acc = accuracy(trained, data.examples);
  if (acc < hp.accuracy_floor)
    throw ConvergenceError("model '" + spec.name + "' reached only " +
                               std::to_string(acc * 100.0) +
                               "% training accuracy after " +
                               std::to_string(hp.epochs) + " epochs",
                           acc);
  return trained;
}

}  // namespace advlab
