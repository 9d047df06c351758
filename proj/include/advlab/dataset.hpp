#pragma once

#include "advlab/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace advlab {

struct LabeledExample {
  Image image;
  int ground_truth = 0;
  int target_label = 0;
};

struct Dataset {
  std::vector<LabeledExample> examples;
  int num_classes = 0;
  ImageShape shape;
  std::string provenance;

  int size() const { return static_cast<int>(examples.size()); }
  void validate() const;
};

/// Draws a target label distinct from y, uniform over the other classes.
int assign_target_label(int y, int num_classes, Rng& rng);

/// Procedural 10-class 16x16 grayscale set: bars, cross, disk, ring, corner,
/// diagonal stripe, ramp, checkerboard, frame. Deterministic given seed;
/// classes are balanced within one example.
Dataset generate_dataset(const std::string& generator, std::uint64_t seed,
                         int count, double noise_std = 12.0);

Dataset slice_dataset(const Dataset& data, int begin, int end);

/// Fraction of examples whose top-1 prediction matches the ground truth.
double accuracy(const Model& model, const std::vector<LabeledExample>& examples);

/// The shared evaluation set: ids into a selection dataset plus a target
/// label per id.
struct TestSet {
  std::vector<int> ids;
  std::vector<int> targets;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(ids.size()); }

  /// Examples in id order with target labels applied.
  std::vector<LabeledExample> materialize(const Dataset& data) const;

  /// Re-checks the selection invariants: every id in range, every image
  /// top-1 correct on every model, every target distinct from the truth.
  void verify(const std::vector<const Model*>& models,
              const Dataset& data) const;
};

/// Uniform seeded choice among the images every model classifies correctly.
/// Throws ShortfallError when fewer than `size` qualify.
TestSet select_test_set(const std::vector<const Model*>& models,
                        const Dataset& data, std::uint64_t seed,
                        int size = 100);

}  // namespace advlab
