#include "advlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace advlab {

namespace {

constexpr int kSide = 16;
constexpr int kClasses = 10;

struct Painter {
  Image* img;
  float& at(int r, int c) { return img->at(0, r, c); }

  void fill(float v) { img->pixels.setConstant(v); }

  void hbar(int r0, int t, float v) {
    for (int r = r0; r < r0 + t; ++r)
      for (int c = 0; c < kSide; ++c) at(r, c) = v;
  }

  void vbar(int c0, int t, float v) {
    for (int r = 0; r < kSide; ++r)
      for (int c = c0; c < c0 + t; ++c) at(r, c) = v;
  }
};

// Classes are deliberately multi-modal (sub-variants, free placement, and
// occasional polarity inversion) so different architectures settle on
// different boundaries around the same labels.
void paint_class(Painter& p, int cls, Rng& rng) {
  float bg = static_cast<float>(rng.uniform(20.0, 100.0));
  float fg = static_cast<float>(rng.uniform(140.0, 235.0));
  if (rng.uniform() < 0.3) std::swap(bg, fg);  // inverted polarity mode
  p.fill(bg);
  switch (cls) {
    case 0: {  // horizontal bar
      const int t = 2 + rng.uniform_int(3);
      const int r0 = rng.uniform_int(kSide - t);
      p.hbar(r0, t, fg);
      break;
    }
    case 1: {  // vertical bar
      const int t = 2 + rng.uniform_int(3);
      const int c0 = rng.uniform_int(kSide - t);
      p.vbar(c0, t, fg);
      break;
    }
    case 2: {  // plus sign with finite arms (not a union of full bars)
      const int arm = 3 + rng.uniform_int(4);
      const int t = 1 + rng.uniform_int(2);
      const int cr = arm + rng.uniform_int(kSide - 2 * arm);
      const int cc = arm + rng.uniform_int(kSide - 2 * arm);
      for (int r = cr - arm; r <= cr + arm; ++r)
        for (int c = cc - t + 1; c < cc + t; ++c) p.at(r, c) = fg;
      for (int c = cc - arm; c <= cc + arm; ++c)
        for (int r = cr - t + 1; r < cr + t; ++r) p.at(r, c) = fg;
      break;
    }
    case 3: {  // filled disk, free placement
      const double rho = rng.uniform(2.5, 6.0);
      const double cx = rng.uniform(rho, kSide - 1 - rho);
      const double cy = rng.uniform(rho, kSide - 1 - rho);
      for (int r = 0; r < kSide; ++r)
        for (int c = 0; c < kSide; ++c)
          if (std::hypot(r - cy, c - cx) <= rho) p.at(r, c) = fg;
      break;
    }
    case 4: {  // ring with a wide hole, free placement
      const double rho = rng.uniform(4.2, 6.5);
      const double hw = rng.uniform(0.8, 1.5);
      const double cx = rng.uniform(rho - 1.0, kSide - rho);
      const double cy = rng.uniform(rho - 1.0, kSide - rho);
      for (int r = 0; r < kSide; ++r)
        for (int c = 0; c < kSide; ++c)
          if (std::abs(std::hypot(r - cy, c - cx) - rho) <= hw)
            p.at(r, c) = fg;
      break;
    }
    case 5: {  // corner block, square or triangular
      const int q = rng.uniform_int(4);
      const int s = 5 + rng.uniform_int(6);
      const bool triangle = rng.uniform_int(2) == 1;
      for (int r = 0; r < s; ++r) {
        for (int c = 0; c < s; ++c) {
          if (triangle && r + c >= s) continue;
          const int rr = (q / 2 == 0) ? r : kSide - 1 - r;
          const int cc = (q % 2 == 0) ? c : kSide - 1 - c;
          p.at(rr, cc) = fg;
        }
      }
      break;
    }
    case 6: {  // diagonal stripe(s)
      const bool anti = rng.uniform_int(2) == 1;
      const int o = -5 + rng.uniform_int(11);
      const double t = rng.uniform(0.8, 2.5);
      const bool twin = rng.uniform_int(3) == 0;
      const int o2 = o + 5 + rng.uniform_int(4);
      for (int r = 0; r < kSide; ++r)
        for (int c = 0; c < kSide; ++c) {
          const int d = anti ? (r + c - (kSide - 1)) : (r - c);
          if (std::abs(d - o) <= t) p.at(r, c) = fg;
          if (twin && std::abs(d - o2) <= t) p.at(r, c) = fg;
        }
      break;
    }
    case 7: {  // ramp: linear or radial
      const double mid = rng.uniform(90.0, 160.0);
      const double amp = rng.uniform(60.0, 95.0);
      if (rng.uniform_int(3) == 0) {
        const double cx = rng.uniform(4.0, 11.0);
        const double cy = rng.uniform(4.0, 11.0);
        for (int r = 0; r < kSide; ++r)
          for (int c = 0; c < kSide; ++c) {
            const double u = std::hypot(r - cy, c - cx) / 10.5;
            p.at(r, c) = static_cast<float>(mid + amp * (u - 0.5));
          }
      } else {
        const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double cphi = std::cos(phi), sphi = std::sin(phi);
        for (int r = 0; r < kSide; ++r)
          for (int c = 0; c < kSide; ++c) {
            const double u = (cphi * (c - 7.5) + sphi * (r - 7.5)) / 7.5;
            p.at(r, c) = static_cast<float>(mid + amp * u);
          }
      }
      break;
    }
    case 8: {  // checkerboard
      const int cell = 2 + rng.uniform_int(3);
      const int pr = rng.uniform_int(cell);
      const int pc = rng.uniform_int(cell);
      for (int r = 0; r < kSide; ++r)
        for (int c = 0; c < kSide; ++c)
          if (((r + pr) / cell + (c + pc) / cell) % 2 == 0) p.at(r, c) = fg;
      break;
    }
    case 9: {  // hollow frame
      const int m = rng.uniform_int(4);
      const int t = 1 + rng.uniform_int(3);
      for (int r = 0; r < kSide; ++r)
        for (int c = 0; c < kSide; ++c) {
          const int d = std::min(std::min(r, c),
                                 std::min(kSide - 1 - r, kSide - 1 - c));
          if (d >= m && d < m + t) p.at(r, c) = fg;
        }
      break;
    }
    default:
      throw Error("unknown shapes10 class");
  }
}

}  // namespace

void Dataset::validate() const {
  for (size_t i = 0; i < examples.size(); ++i) {
    const LabeledExample& e = examples[i];
    if (!(e.image.shape == shape))
      throw InvariantError("dataset example " + std::to_string(i) +
                           " has a mismatched shape");
    if (!in_pixel_range(e.image))
      throw InvariantError("dataset example " + std::to_string(i) +
                           " has pixels outside [0, 255]");
    if (e.ground_truth < 0 || e.ground_truth >= num_classes ||
        e.target_label < 0 || e.target_label >= num_classes)
      throw InvariantError("dataset example " + std::to_string(i) +
                           " has an out-of-range label");
    if (e.target_label == e.ground_truth)
      throw InvariantError("dataset example " + std::to_string(i) +
                           " has target equal to the ground truth");
  }
}

int assign_target_label(int y, int num_classes, Rng& rng) {
  return (y + 1 + rng.uniform_int(num_classes - 1)) % num_classes;
}

Dataset generate_dataset(const std::string& generator, std::uint64_t seed,
                         int count, double noise_std) {
  if (generator != "shapes10")
    throw ConfigError("unknown dataset generator '" + generator + "'");
  if (count < 1) throw ConfigError("dataset count must be at least 1");

  Dataset data;
  data.num_classes = kClasses;
  data.shape = {1, kSide, kSide};
  data.provenance = "shapes10:seed=" + std::to_string(seed) +
                    ":noise=" + std::to_string(noise_std);
  data.examples.reserve(static_cast<size_t>(count));

  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
    const int cls = i % kClasses;
    LabeledExample e;
    e.image = make_image(data.shape, VecF::Zero(data.shape.size()));
    Painter painter{&e.image};
    paint_class(painter, cls, rng);
    for (int j = 0; j < data.shape.size(); ++j)
      e.image.pixels[j] += static_cast<float>(rng.normal() * noise_std);
    e.image = clip(e.image);
    e.ground_truth = cls;
    e.target_label = assign_target_label(cls, kClasses, rng);
    data.examples.push_back(std::move(e));
  }
  return data;
}

Dataset slice_dataset(const Dataset& data, int begin, int end) {
  if (begin < 0 || end > data.size() || begin > end)
    throw RangeError("dataset slice [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range");
  Dataset out;
  out.num_classes = data.num_classes;
  out.shape = data.shape;
  out.provenance = data.provenance + ":slice=" + std::to_string(begin) + "-" +
                   std::to_string(end);
  out.examples.assign(data.examples.begin() + begin,
                      data.examples.begin() + end);
  return out;
}

double accuracy(const Model& model,
                const std::vector<LabeledExample>& examples) {
  if (examples.empty()) return 0.0;
  int correct = 0;
  for (const auto& e : examples)
    if (forward(model, e.image).top1() == e.ground_truth) ++correct;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

std::vector<LabeledExample> TestSet::materialize(const Dataset& data) const {
  std::vector<LabeledExample> out;
  out.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= data.size())
      throw InvariantError("test set id " + std::to_string(ids[i]) +
                           " out of range");
    LabeledExample e = data.examples[static_cast<size_t>(ids[i])];
    e.target_label = targets[i];
    out.push_back(std::move(e));
  }
  return out;
}

void TestSet::verify(const std::vector<const Model*>& models,
                     const Dataset& data) const {
  if (ids.size() != targets.size())
    throw InvariantError("test set ids and targets differ in length");
  const auto examples = materialize(data);
  for (size_t i = 0; i < examples.size(); ++i) {
    const LabeledExample& e = examples[i];
    if (e.target_label == e.ground_truth || e.target_label < 0 ||
        e.target_label >= data.num_classes)
      throw InvariantError("test set entry " + std::to_string(i) +
                           " has an invalid target label");
    for (const Model* m : models) {
      if (forward(*m, e.image).top1() != e.ground_truth)
        throw InvariantError("test set entry " + std::to_string(i) +
                             " is not classified correctly by model '" +
                             m->name() + "'");
    }
  }
}

TestSet select_test_set(const std::vector<const Model*>& models,
                        const Dataset& data, std::uint64_t seed, int size) {
  std::vector<int> eligible;
  for (int i = 0; i < data.size(); ++i) {
    const LabeledExample& e = data.examples[static_cast<size_t>(i)];
    bool all_correct = true;
    for (const Model* m : models) {
      if (forward(*m, e.image).top1() != e.ground_truth) {
        all_correct = false;
        break;
      }
    }
    if (all_correct) eligible.push_back(i);
  }
  if (static_cast<int>(eligible.size()) < size)
    throw ShortfallError("only " + std::to_string(eligible.size()) +
                             " of the required " + std::to_string(size) +
                             " images are correct under all models",
                         static_cast<int>(eligible.size()));

  Rng rng(Rng::mix(seed, 0x7e57u));
  rng.shuffle(eligible);
  TestSet set;
  set.seed = seed;
  set.ids.assign(eligible.begin(), eligible.begin() + size);
  std::sort(set.ids.begin(), set.ids.end());
  set.targets.resize(set.ids.size());
  for (size_t i = 0; i < set.ids.size(); ++i) {
    Rng target_rng(Rng::mix(seed, 0x9a6e0000u + static_cast<std::uint64_t>(set.ids[i])));
    const int y = data.examples[static_cast<size_t>(set.ids[i])].ground_truth;
    set.targets[i] = assign_target_label(y, data.num_classes, target_rng);
  }
  set.verify(models, data);
  return set;
}

}  // namespace advlab
