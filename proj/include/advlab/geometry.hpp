#pragma once

#include "advlab/evaluation.hpp"

namespace advlab {

struct PlaneExtent {
  double u_min = -100.0;
  double u_max = 100.0;
  double v_min = -100.0;
  double v_max = 100.0;
};

/// A 2-D slice of image space around an origin image: point (u, v) is
/// clip(x + u*d1 + v*d2) with orthonormal d1, d2 in pixel units.
struct Plane {
  Image origin;
  VecD d1;
  VecD d2;
  PlaneExtent extent;
  int nu = 201;
  int nv = 201;

  double u_at(int iu) const {
    return nu == 1 ? extent.u_min
                   : extent.u_min +
                         iu * (extent.u_max - extent.u_min) / (nu - 1);
  }
  double v_at(int iv) const {
    return nv == 1 ? extent.v_min
                   : extent.v_min +
                         iv * (extent.v_max - extent.v_min) / (nv - 1);
  }
};

enum class PlaneAxis { Gradient, TargetedAdvDirection };

/// d1 is the normalized chosen direction (the model's non-targeted gradient,
/// or adversarial - original); d2 is a seeded random normal vector with the
/// d1 component projected out, renormalized, redrawn on a near-zero residual.
Plane make_plane(const Model& model, const LabeledExample& example,
                 PlaneAxis axis, std::uint64_t seed, const PlaneExtent& extent,
                 int nu, int nv, const Image* adversarial = nullptr);

/// Predicted class index per grid point; entry (iv, iu) corresponds to
/// (u_at(iu), v_at(iv)).
using LabelGrid = GridI;

std::vector<LabelGrid> scan_plane(const std::vector<const Model*>& models,
                                  const Plane& plane, int threads = 1);

/// Number of distinct labels appearing in the grid.
int region_label_count(const LabelGrid& grid);

/// True where the cell carries `label` and at least one 4-neighbor inside the
/// grid differs; cells at the window edge are not boundary by themselves.
GridB boundary_map(const LabelGrid& grid, int label);

struct LogitProfile {
  std::vector<double> bs;
  std::vector<int> labels;  // clean top-10 labels plus the ground truth
  MatD logits;              // (sample, tracked label)
};

/// Pre-softmax logits along the attack direction, sampled at the given B
/// values (same RMSD-unit parameterization as the direction scans).
LogitProfile logit_profile(const Model& model, const LabeledExample& example,
                           DirectionKind kind,
                           const std::vector<double>& b_samples);

}  // namespace advlab
