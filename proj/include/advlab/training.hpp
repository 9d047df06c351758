#pragma once

#include "advlab/dataset.hpp"

namespace advlab {

struct TrainHyperparams {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double accuracy_floor = 0.95;
  // Std of seeded Gaussian pixel noise added (then clipped) per presentation.
  // Varying this across models diversifies the functions they learn.
  double augment_noise = 0.0;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD with momentum on the cross-entropy loss. Deterministic
/// given the seed: initialization, shuffling, and update order are all fixed.
/// Throws ConvergenceError (carrying the final accuracy) when the trained
/// model misses the accuracy floor on the training split.
Model train(const ModelSpec& spec, const Dataset& data,
            const TrainHyperparams& hp);

}  // namespace advlab
