#pragma once

#include "advlab/common.hpp"

namespace advlab {

struct ImageShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  int size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// A flat pixel vector in [0, 255], channel-major:
/// index = c * height * width + row * width + col.
struct Image {
  VecF pixels;
  ImageShape shape;

  int size() const { return static_cast<int>(pixels.size()); }
  float& at(int c, int r, int col) {
    return pixels[(c * shape.height + r) * shape.width + col];
  }
  float at(int c, int r, int col) const {
    return pixels[(c * shape.height + r) * shape.width + col];
  }
};

Image make_image(const ImageShape& shape, VecF pixels);

/// Clamps every entry of an expression to the pixel box [0, 255].
template <typename Derived>
auto clipped(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return x.cwiseMax(S(0)).cwiseMin(S(255));
}

Image clip(const Image& image);

bool in_pixel_range(const Image& image);

/// Root mean square deviation between two equal-shape pixel vectors,
/// accumulated in double.
double rmsd(const Image& a, const Image& b);
double rmsd_flat(const VecF& a, const VecF& b);

/// Entrywise sign with sgn(0) = 0.
template <typename Derived>
VecD sign_vector(const Eigen::MatrixBase<Derived>& g) {
  VecD s(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double v = static_cast<double>(g[i]);
    s[i] = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  }
  return s;
}

}  // namespace advlab
