#include "advlab/image.hpp"

#include <cmath>

namespace advlab {

Image make_image(const ImageShape& shape, VecF pixels) {
  if (static_cast<int>(pixels.size()) != shape.size()) {
    throw ShapeError("image pixel count " + std::to_string(pixels.size()) +
                     " does not match shape " + std::to_string(shape.channels) +
                     "x" + std::to_string(shape.height) + "x" +
                     std::to_string(shape.width));
  }
  return Image{std::move(pixels), shape};
}

Image clip(const Image& image) {
  return Image{clipped(image.pixels), image.shape};
}

bool in_pixel_range(const Image& image) {
  return (image.pixels.array() >= 0.0f).all() &&
         (image.pixels.array() <= 255.0f).all();
}

double rmsd_flat(const VecF& a, const VecF& b) {
  if (a.size() != b.size()) {
    throw ShapeError("rmsd: size mismatch " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
  const VecD d = a.cast<double>() - b.cast<double>();
  return std::sqrt(d.squaredNorm() / static_cast<double>(a.size()));
}

double rmsd(const Image& a, const Image& b) {
  if (!(a.shape == b.shape)) {
    throw ShapeError("rmsd: shape mismatch");
  }
  return rmsd_flat(a.pixels, b.pixels);
}

}  // namespace advlab
