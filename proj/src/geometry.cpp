#include "advlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace advlab {

Plane make_plane(const Model& model, const LabeledExample& example,
                 PlaneAxis axis, std::uint64_t seed, const PlaneExtent& extent,
                 int nu, int nv, const Image* adversarial) {
  if (nu < 1 || nv < 1) throw ConfigError("plane resolution must be positive");
  if (extent.u_min > extent.u_max || extent.v_min > extent.v_max)
    throw ConfigError("plane extent is inverted");

  VecD dir;
  if (axis == PlaneAxis::Gradient) {
    dir = input_gradient(model, example.image,
                         LossSpec::nontargeted(example.ground_truth))
              .grad;
  } else {
    if (!adversarial)
      throw PreconditionError(
          "targeted_adv_direction needs an adversarial image");
    dir = adversarial->pixels.cast<double>() -
          example.image.pixels.cast<double>();
  }
  const double norm = dir.norm();
  if (norm < 1e-20)
    throw DegenerateGradientError("plane axis direction is degenerate");

  Plane plane;
  plane.origin = example.image;
  plane.d1 = dir / norm;
  plane.extent = extent;
  plane.nu = nu;
  plane.nv = nv;

  for (std::uint64_t attempt = 0;; ++attempt) {
    if (attempt == 64)
      throw DegenerateGradientError(
          "could not draw a direction orthogonal to the plane axis");
    Rng rng(Rng::mix(seed, attempt));
    VecD g(plane.d1.size());
    for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = rng.normal();
    VecD r = g - g.dot(plane.d1) * plane.d1;
    const double rn = r.norm();
    if (rn <= 1e-9) continue;
    plane.d2 = r / rn;
    break;
  }
  return plane;
}

std::vector<LabelGrid> scan_plane(const std::vector<const Model*>& models,
                                  const Plane& plane, int threads) {
  if (models.empty()) throw ConfigError("scan_plane needs at least one model");
  std::vector<LabelGrid> grids(models.size());
  for (auto& g : grids) g.setZero(plane.nv, plane.nu);

  const VecD origin = plane.origin.pixels.cast<double>();
  // Coordinates are in RMSD units, like the direction scans: the point at
  // (u, 0) sits at unclipped RMSD |u| from the origin image.
  const double root_n = std::sqrt(static_cast<double>(plane.origin.size()));
  parallel_for(plane.nv, threads, [&](int iv) {
    const double v = plane.v_at(iv) * root_n;
    for (int iu = 0; iu < plane.nu; ++iu) {
      const double u = plane.u_at(iu) * root_n;
      const Image point{
          clipped(origin + u * plane.d1 + v * plane.d2).cast<float>(),
          plane.origin.shape};
      for (size_t m = 0; m < models.size(); ++m)
        grids[m](iv, iu) = forward(*models[m], point).top1();
    }
  });
  return grids;
}

int region_label_count(const LabelGrid& grid) {
  std::set<int> labels(grid.data(), grid.data() + grid.size());
  return static_cast<int>(labels.size());
}

GridB boundary_map(const LabelGrid& grid, int label) {
  GridB out = GridB::Zero(grid.rows(), grid.cols());
  for (Eigen::Index r = 0; r < grid.rows(); ++r) {
    for (Eigen::Index c = 0; c < grid.cols(); ++c) {
      if (grid(r, c) != label) continue;
      const bool differs =
          (r > 0 && grid(r - 1, c) != label) ||
          (r + 1 < grid.rows() && grid(r + 1, c) != label) ||
          (c > 0 && grid(r, c - 1) != label) ||
          (c + 1 < grid.cols() && grid(r, c + 1) != label);
      out(r, c) = differs ? 1 : 0;
    }
  }
  return out;
}

LogitProfile logit_profile(const Model& model, const LabeledExample& example,
                           DirectionKind kind,
                           const std::vector<double>& b_samples) {
  const Prediction clean = forward(model, example.image);
  const int classes = model.num_classes();

  // Clean top-10 labels (ties by lowest index), plus the truth if outside.
  std::vector<int> order(static_cast<size_t>(classes));
  for (int i = 0; i < classes; ++i) order[static_cast<size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return clean.probs[a] > clean.probs[b];
  });
  const int tracked = std::min(10, classes);
  std::vector<int> labels(order.begin(), order.begin() + tracked);
  if (std::find(labels.begin(), labels.end(), example.ground_truth) ==
      labels.end())
    labels.push_back(example.ground_truth);

  const VecD delta = attack_direction(model, example, kind);
  const double root_n = std::sqrt(static_cast<double>(example.image.size()));
  const VecD scaled = root_n * delta;

  LogitProfile profile;
  profile.bs = b_samples;
  profile.labels = labels;
  profile.logits.resize(static_cast<Eigen::Index>(b_samples.size()),
                        static_cast<Eigen::Index>(labels.size()));
  for (size_t s = 0; s < b_samples.size(); ++s) {
    const Image x_b{clipped(example.image.pixels.cast<double>() +
                            b_samples[s] * scaled)
                        .cast<float>(),
                    example.image.shape};
    const Prediction pred = forward(model, x_b);
    for (size_t l = 0; l < labels.size(); ++l)
      profile.logits(static_cast<Eigen::Index>(s),
                     static_cast<Eigen::Index>(l)) =
          static_cast<double>(pred.logits[labels[l]]);
  }
  return profile;
}

}  // namespace advlab
