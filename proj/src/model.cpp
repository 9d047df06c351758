#include "advlab/model.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace advlab {

namespace {

std::atomic<std::uint64_t> g_grad_evals{0};

struct ShapeState {
  int c = 0, h = 0, w = 0;
  bool flat = false;
  int size() const { return c * h * w; }
};

ShapeState input_state(const ModelSpec& spec) {
  ShapeState s{spec.input.channels, spec.input.height, spec.input.width, false};
  s.flat = (s.h == 1 && s.w == 1);
  return s;
}

[[noreturn]] void layer_error(int index, LayerKind kind, const std::string& msg) {
  throw ShapeError("layer " + std::to_string(index) + " (" +
                   layer_kind_name(kind) + "): " + msg);
}

ShapeState advance(const ShapeState& in, const LayerSpec& layer, int index,
                   int num_classes, bool is_last) {
  ShapeState out = in;
  switch (layer.kind) {
    case LayerKind::Dense:
      if (!in.flat)
        layer_error(index, layer.kind, "expects a flattened input");
      if (layer.in_dim != in.size())
        layer_error(index, layer.kind,
                    "input dimension " + std::to_string(layer.in_dim) +
                        " does not match incoming size " +
                        std::to_string(in.size()));
      if (layer.out_dim < 1)
        layer_error(index, layer.kind, "output dimension must be positive");
      out = {layer.out_dim, 1, 1, true};
      break;
    case LayerKind::Conv:
      if (in.flat) layer_error(index, layer.kind, "expects a spatial input");
      if (layer.in_channels != in.c)
        layer_error(index, layer.kind,
                    "input channels " + std::to_string(layer.in_channels) +
                        " do not match incoming channels " +
                        std::to_string(in.c));
      if (layer.kernel < 1 || layer.kernel % 2 == 0)
        layer_error(index, layer.kind, "kernel must be odd and positive");
      if (layer.kernel > in.h || layer.kernel > in.w)
        layer_error(index, layer.kind, "kernel exceeds the spatial extent");
      if (layer.out_channels < 1)
        layer_error(index, layer.kind, "output channels must be positive");
      out.c = layer.out_channels;
      break;
    case LayerKind::Relu:
      break;
    case LayerKind::MaxPool:
      if (in.flat) layer_error(index, layer.kind, "expects a spatial input");
      if (in.h % 2 != 0 || in.w % 2 != 0)
        layer_error(index, layer.kind, "spatial extent must be even");
      out.h = in.h / 2;
      out.w = in.w / 2;
      break;
    case LayerKind::Flatten:
      if (in.flat) layer_error(index, layer.kind, "input is already flat");
      out = {in.size(), 1, 1, true};
      break;
    case LayerKind::Softmax:
      if (!in.flat) layer_error(index, layer.kind, "expects a flattened input");
      if (in.size() != num_classes)
        layer_error(index, layer.kind,
                    "incoming size " + std::to_string(in.size()) +
                        " does not match num_classes " +
                        std::to_string(num_classes));
      if (!is_last)
        layer_error(index, layer.kind, "must be the final layer");
      break;
  }
  return out;
}

std::vector<ShapeState> shape_states(const ModelSpec& spec) {
  std::vector<ShapeState> states;
  states.reserve(spec.layers.size() + 1);
  states.push_back(input_state(spec));
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    states.push_back(advance(states.back(), spec.layers[i], static_cast<int>(i),
                             spec.num_classes,
                             i + 1 == spec.layers.size()));
  }
  return states;
}

int layer_weight_count(const LayerSpec& layer) {
  switch (layer.kind) {
    case LayerKind::Dense:
      return layer.in_dim * layer.out_dim + layer.out_dim;
    case LayerKind::Conv:
      return layer.out_channels * layer.in_channels * layer.kernel *
                 layer.kernel +
             layer.out_channels;
    default:
      return 0;
  }
}

// cols(row, pos) with row = (ic*k + kr)*k + kc and pos = r*w + c.
void im2col(const double* x, int c, int h, int w, int k, MatD& cols) {
  const int pad = k / 2;
  cols.resize(c * k * k, h * w);
  for (int ic = 0; ic < c; ++ic) {
    const double* plane = x + ic * h * w;
    for (int kr = 0; kr < k; ++kr) {
      for (int kc = 0; kc < k; ++kc) {
        const int row = (ic * k + kr) * k + kc;
        for (int r = 0; r < h; ++r) {
          const int r2 = r + kr - pad;
          for (int col = 0; col < w; ++col) {
            const int c2 = col + kc - pad;
            cols(row, r * w + col) =
                (r2 >= 0 && r2 < h && c2 >= 0 && c2 < w) ? plane[r2 * w + c2]
                                                         : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const MatD& dcols, int c, int h, int w, int k, double* dx) {
  const int pad = k / 2;
  for (int ic = 0; ic < c; ++ic) {
    double* plane = dx + ic * h * w;
    for (int kr = 0; kr < k; ++kr) {
      for (int kc = 0; kc < k; ++kc) {
        const int row = (ic * k + kr) * k + kc;
        for (int r = 0; r < h; ++r) {
          const int r2 = r + kr - pad;
          if (r2 < 0 || r2 >= h) continue;
          for (int col = 0; col < w; ++col) {
            const int c2 = col + kc - pad;
            if (c2 < 0 || c2 >= w) continue;
            plane[r2 * w + c2] += dcols(row, r * w + col);
          }
        }
      }
    }
  }
}

void maxpool_forward(const double* x, int c, int h, int w, double* out,
                     std::vector<int>* src) {
  const int oh = h / 2, ow = w / 2;
  if (src) src->assign(static_cast<size_t>(c) * oh * ow, 0);
  for (int ic = 0; ic < c; ++ic) {
    const double* plane = x + ic * h * w;
    for (int r = 0; r < oh; ++r) {
      for (int col = 0; col < ow; ++col) {
        int best = (2 * r) * w + 2 * col;
        double best_v = plane[best];
        // Scan order fixes tie-breaking to the first maximum.
        const int cands[3] = {(2 * r) * w + 2 * col + 1,
                              (2 * r + 1) * w + 2 * col,
                              (2 * r + 1) * w + 2 * col + 1};
        for (int cand : cands) {
          if (plane[cand] > best_v) {
            best_v = plane[cand];
            best = cand;
          }
        }
        const int o = (ic * oh + r) * ow + col;
        out[o] = best_v;
        if (src) (*src)[o] = ic * h * w + best;
      }
    }
  }
}

double clamp_prob(double p) {
  return std::min(std::max(p, kLogEps), 1.0 - kLogEps);
}

double loss_from_probs(const VecD& probs, const LossSpec& loss) {
  if (loss.label < 0 || loss.label >= static_cast<int>(probs.size()))
    throw RangeError("class index " + std::to_string(loss.label) +
                     " out of range for " + std::to_string(probs.size()) +
                     " classes");
  const double p = clamp_prob(probs[loss.label]);
  return loss.kind == LossSpec::Kind::Nontargeted ? std::log1p(-p)
                                                  : -std::log(p);
}

void check_input_shape(const Model& model, const Image& image) {
  if (!(image.shape == model.input_shape()))
    throw ShapeError("input: image shape " +
                     std::to_string(image.shape.channels) + "x" +
                     std::to_string(image.shape.height) + "x" +
                     std::to_string(image.shape.width) +
                     " does not match model '" + model.name() + "'");
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

LayerSpec dense_layer(int in_dim, int out_dim) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.in_dim = in_dim;
  l.out_dim = out_dim;
  return l;
}

LayerSpec conv_layer(int in_channels, int out_channels, int kernel) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.in_channels = in_channels;
  l.out_channels = out_channels;
  l.kernel = kernel;
  return l;
}

LayerSpec relu_layer() { return LayerSpec{LayerKind::Relu}; }
LayerSpec maxpool_layer() { return LayerSpec{LayerKind::MaxPool}; }
LayerSpec flatten_layer() { return LayerSpec{LayerKind::Flatten}; }
LayerSpec softmax_layer() { return LayerSpec{LayerKind::Softmax}; }

int ModelSpec::weight_count() const {
  int n = 0;
  for (const auto& l : layers) n += layer_weight_count(l);
  return n;
}

void ModelSpec::validate() const {
  if (name.empty() || name.find_first_of(" \t\n\r") != std::string::npos)
    throw ShapeError("model name must be a single non-empty token");
  if (input.channels < 1 || input.height < 1 || input.width < 1)
    throw ShapeError("input shape must be positive");
  if (num_classes < 2) throw ShapeError("num_classes must be at least 2");
  if (input_scale == 0.0f) throw ShapeError("input_scale must be nonzero");
  if (layers.empty()) throw ShapeError("model has no layers");
  if (layers.back().kind != LayerKind::Softmax)
    throw ShapeError("final layer must be softmax");
  for (size_t i = 0; i + 1 < layers.size(); ++i)
    if (layers[i].kind == LayerKind::Softmax)
      layer_error(static_cast<int>(i), layers[i].kind,
                  "must be the final layer");
  shape_states(*this);  // throws on any incompatibility
}

std::string ModelSpec::canonical_text() const {
  char buf[64];
  std::ostringstream os;
  os << "name " << name << "\n";
  os << "input " << input.channels << " " << input.height << " "
     << input.width << "\n";
  os << "classes " << num_classes << "\n";
  std::snprintf(buf, sizeof buf, "%.9g %.9g", static_cast<double>(input_scale),
                static_cast<double>(input_shift));
  os << "normalize " << buf << "\n";
  for (const auto& l : layers) {
    os << "layer " << layer_kind_name(l.kind);
    if (l.kind == LayerKind::Dense)
      os << " " << l.in_dim << " " << l.out_dim;
    else if (l.kind == LayerKind::Conv)
      os << " " << l.in_channels << " " << l.out_channels << " " << l.kernel;
    os << "\n";
  }
  return os.str();
}

ModelSpec ModelSpec::parse_canonical(const std::string& text) {
  ModelSpec spec;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "name") {
      ls >> spec.name;
    } else if (key == "input") {
      ls >> spec.input.channels >> spec.input.height >> spec.input.width;
    } else if (key == "classes") {
      ls >> spec.num_classes;
    } else if (key == "normalize") {
      ls >> spec.input_scale >> spec.input_shift;
    } else if (key == "layer") {
      std::string kind;
      ls >> kind;
      if (kind == "dense") {
        int in = 0, out = 0;
        ls >> in >> out;
        spec.layers.push_back(dense_layer(in, out));
      } else if (kind == "conv") {
        int ic = 0, oc = 0, k = 0;
        ls >> ic >> oc >> k;
        spec.layers.push_back(conv_layer(ic, oc, k));
      } else if (kind == "relu") {
        spec.layers.push_back(relu_layer());
      } else if (kind == "maxpool") {
        spec.layers.push_back(maxpool_layer());
      } else if (kind == "flatten") {
        spec.layers.push_back(flatten_layer());
      } else if (kind == "softmax") {
        spec.layers.push_back(softmax_layer());
      } else {
        throw SerializationError("unknown layer kind '" + kind + "'");
      }
    } else {
      throw SerializationError("unknown spec directive '" + key + "'");
    }
    if (ls.fail())
      throw SerializationError("malformed spec line '" + line + "'");
  }
  spec.validate();
  return spec;
}

ModelSpec stock_model_spec(const std::string& arch, const std::string& name) {
  ModelSpec s;
  s.name = name.empty() ? arch : name;
  s.input = {1, 16, 16};
  s.num_classes = 10;
  if (arch == "dense2") {
    s.input_scale = 1.0f / 255.0f;
    s.layers = {flatten_layer(), dense_layer(256, 80), relu_layer(),
                dense_layer(80, 10), softmax_layer()};
  } else if (arch == "dense3") {
    s.input_scale = 1.0f / 127.5f;
    s.input_shift = -1.0f;
    s.layers = {flatten_layer(), dense_layer(256, 64), relu_layer(),
                dense_layer(64, 32), relu_layer(), dense_layer(32, 10),
                softmax_layer()};
  } else if (arch == "conv_small") {
    s.input_scale = 1.0f / 255.0f;
    s.input_shift = -0.5f;
    s.layers = {conv_layer(1, 6, 3),  relu_layer(),         maxpool_layer(),
                flatten_layer(),      dense_layer(384, 48), relu_layer(),
                dense_layer(48, 10),  softmax_layer()};
  } else if (arch == "conv_wide") {
    s.input_scale = 1.0f / 127.5f;
    s.input_shift = -1.0f;
    s.layers = {conv_layer(1, 12, 5), relu_layer(), maxpool_layer(),
                flatten_layer(), dense_layer(768, 10), softmax_layer()};
  } else if (arch == "conv_deep") {
    s.input_scale = 1.0f / 255.0f;
    s.layers = {conv_layer(1, 8, 3),  relu_layer(),          maxpool_layer(),
                conv_layer(8, 16, 3), relu_layer(),          maxpool_layer(),
                flatten_layer(),      dense_layer(256, 10),  softmax_layer()};
  } else if (arch == "conv_blackbox") {
    s.input_scale = 1.0f / 160.0f;
    s.input_shift = -0.8f;
    s.layers = {conv_layer(1, 8, 5), relu_layer(), maxpool_layer(),
                flatten_layer(), dense_layer(512, 10), softmax_layer()};
  } else {
    throw ConfigError("unknown architecture '" + arch + "'");
  }
  s.validate();
  return s;
}

const std::vector<std::string>& stock_architectures() {
  static const std::vector<std::string> archs = {
      "dense2", "dense3", "conv_small", "conv_wide", "conv_deep"};
  return archs;
}

int Prediction::top1() const {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

Model::Model(ModelSpec spec, VecF weights)
    : spec_(std::move(spec)), weights_(std::move(weights)) {
  spec_.validate();
  if (static_cast<int>(weights_.size()) != spec_.weight_count())
    throw ShapeError("model '" + spec_.name + "' expects " +
                     std::to_string(spec_.weight_count()) + " weights, got " +
                     std::to_string(weights_.size()));
  params_.resize(spec_.layers.size());
  int off = 0;
  for (size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    if (l.kind == LayerKind::Dense) {
      params_[i].W.resize(l.out_dim, l.in_dim);
      for (int r = 0; r < l.out_dim; ++r)
        for (int c = 0; c < l.in_dim; ++c)
          params_[i].W(r, c) = static_cast<double>(weights_[off + r * l.in_dim + c]);
      off += l.out_dim * l.in_dim;
      params_[i].b.resize(l.out_dim);
      for (int r = 0; r < l.out_dim; ++r)
        params_[i].b[r] = static_cast<double>(weights_[off + r]);
      off += l.out_dim;
    } else if (l.kind == LayerKind::Conv) {
      const int cols = l.in_channels * l.kernel * l.kernel;
      params_[i].W.resize(l.out_channels, cols);
      for (int r = 0; r < l.out_channels; ++r)
        for (int c = 0; c < cols; ++c)
          params_[i].W(r, c) = static_cast<double>(weights_[off + r * cols + c]);
      off += l.out_channels * cols;
      params_[i].b.resize(l.out_channels);
      for (int r = 0; r < l.out_channels; ++r)
        params_[i].b[r] = static_cast<double>(weights_[off + r]);
      off += l.out_channels;
    }
  }
}

VecF initial_weights(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  VecF w(spec.weight_count());
  int off = 0;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::Dense) {
      const double std_dev = std::sqrt(2.0 / l.in_dim);
      for (int i = 0; i < l.in_dim * l.out_dim; ++i)
        w[off + i] = static_cast<float>(rng.normal() * std_dev);
      off += l.in_dim * l.out_dim;
      for (int i = 0; i < l.out_dim; ++i) w[off + i] = 0.0f;
      off += l.out_dim;
    } else if (l.kind == LayerKind::Conv) {
      const int fan_in = l.in_channels * l.kernel * l.kernel;
      const double std_dev = std::sqrt(2.0 / fan_in);
      for (int i = 0; i < l.out_channels * fan_in; ++i)
        w[off + i] = static_cast<float>(rng.normal() * std_dev);
      off += l.out_channels * fan_in;
      for (int i = 0; i < l.out_channels; ++i) w[off + i] = 0.0f;
      off += l.out_channels;
    }
  }
  return w;
}

VecD softmax(const VecD& logits) {
  const double m = logits.maxCoeff();
  VecD e = (logits.array() - m).exp();
  const double total = e.sum();
  VecD p = e / total;
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = clamp_prob(p[i]);
  return p;
}

ForwardTrace forward_trace(const Model& model, const Image& image) {
  check_input_shape(model, image);
  const ModelSpec& spec = model.spec();
  const auto states = shape_states(spec);

  ForwardTrace trace;
  trace.acts.resize(spec.layers.size() + 1);
  trace.conv_cols.resize(spec.layers.size());
  trace.pool_src.resize(spec.layers.size());

  trace.acts[0] = static_cast<double>(spec.input_scale) *
                      image.pixels.cast<double>().array() +
                  static_cast<double>(spec.input_shift);

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const VecD& x = trace.acts[i];
    VecD& y = trace.acts[i + 1];
    const ShapeState& in = states[i];
    switch (l.kind) {
      case LayerKind::Dense:
        y.noalias() = model.layer_params()[i].W * x;
        y += model.layer_params()[i].b;
        break;
      case LayerKind::Conv: {
        im2col(x.data(), in.c, in.h, in.w, l.kernel, trace.conv_cols[i]);
        MatD out = model.layer_params()[i].W * trace.conv_cols[i];
        out.colwise() += model.layer_params()[i].b;
        y.resize(out.size());
        for (int oc = 0; oc < l.out_channels; ++oc)
          y.segment(oc * in.h * in.w, in.h * in.w) = out.row(oc).transpose();
        break;
      }
      case LayerKind::Relu:
        y = x.cwiseMax(0.0);
        break;
      case LayerKind::MaxPool:
        y.resize(in.c * (in.h / 2) * (in.w / 2));
        maxpool_forward(x.data(), in.c, in.h, in.w, y.data(),
                        &trace.pool_src[i]);
        break;
      case LayerKind::Flatten:
        y = x;
        break;
      case LayerKind::Softmax:
        trace.logits = x;
        trace.probs = softmax(x);
        y = trace.probs;
        break;
    }
  }
  return trace;
}

Prediction prediction_from_trace(const ForwardTrace& trace) {
  Prediction pred;
  pred.logits = trace.logits.cast<float>();
  pred.probs = trace.probs.cast<float>();
  return pred;
}

Prediction forward(const Model& model, const Image& image) {
  check_input_shape(model, image);
  const ModelSpec& spec = model.spec();
  const auto states = shape_states(spec);

  thread_local VecD a, b;
  thread_local MatD cols, conv_out;

  a = static_cast<double>(spec.input_scale) *
          image.pixels.cast<double>().array() +
      static_cast<double>(spec.input_shift);

  Prediction pred;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const ShapeState& in = states[i];
    switch (l.kind) {
      case LayerKind::Dense:
        b.noalias() = model.layer_params()[i].W * a;
        b += model.layer_params()[i].b;
        a.swap(b);
        break;
      case LayerKind::Conv: {
        im2col(a.data(), in.c, in.h, in.w, l.kernel, cols);
        conv_out.noalias() = model.layer_params()[i].W * cols;
        conv_out.colwise() += model.layer_params()[i].b;
        b.resize(conv_out.size());
        for (int oc = 0; oc < l.out_channels; ++oc)
          b.segment(oc * in.h * in.w, in.h * in.w) =
              conv_out.row(oc).transpose();
        a.swap(b);
        break;
      }
      case LayerKind::Relu:
        a = a.cwiseMax(0.0);
        break;
      case LayerKind::MaxPool:
        b.resize(in.c * (in.h / 2) * (in.w / 2));
        maxpool_forward(a.data(), in.c, in.h, in.w, b.data(), nullptr);
        a.swap(b);
        break;
      case LayerKind::Flatten:
        break;
      case LayerKind::Softmax: {
        pred.logits = a.cast<float>();
        pred.probs = softmax(a).cast<float>();
        break;
      }
    }
  }
  return pred;
}

double loss_nontargeted(const Prediction& pred, int y) {
  return loss_from_probs(pred.probs.cast<double>(),
                         LossSpec::nontargeted(y));
}

double loss_targeted(const Prediction& pred, int y_star) {
  return loss_from_probs(pred.probs.cast<double>(), LossSpec::targeted(y_star));
}

double loss_value(const Prediction& pred, const LossSpec& loss) {
  return loss_from_probs(pred.probs.cast<double>(), loss);
}

double loss_value_at(const Model& model, const Image& image,
                     const LossSpec& loss) {
  return loss_from_probs(forward_trace(model, image).probs, loss);
}

VecD loss_logit_gradient(const VecD& probs, const LossSpec& loss) {
  if (loss.label < 0 || loss.label >= static_cast<int>(probs.size()))
    throw RangeError("class index " + std::to_string(loss.label) +
                     " out of range");
  VecD g(probs.size());
  if (loss.kind == LossSpec::Kind::Targeted) {
    g = probs;
    g[loss.label] -= 1.0;
  } else {
    const double py = probs[loss.label];
    const double denom = std::max(1.0 - py, kLogEps);
    g = probs * (py / denom);
    g[loss.label] = -py;
  }
  return g;
}

VecD backward_from_logits(const Model& model, const ForwardTrace& trace,
                          const VecD& dlogits, VecD* weight_grad) {
  g_grad_evals.fetch_add(1, std::memory_order_relaxed);
  const ModelSpec& spec = model.spec();
  const auto states = shape_states(spec);
  if (weight_grad && weight_grad->size() != spec.weight_count())
    throw ShapeError("weight gradient buffer has the wrong size");

  // Offsets of each parameterized layer inside the flat weight vector.
  std::vector<int> offsets(spec.layers.size(), 0);
  {
    int off = 0;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
      offsets[i] = off;
      off += layer_weight_count(spec.layers[i]);
    }
  }

  VecD g = dlogits;
  for (int i = static_cast<int>(spec.layers.size()) - 1; i >= 0; --i) {
    const LayerSpec& l = spec.layers[static_cast<size_t>(i)];
    const VecD& x = trace.acts[static_cast<size_t>(i)];
    const ShapeState& in = states[static_cast<size_t>(i)];
    switch (l.kind) {
      case LayerKind::Softmax:
        break;  // the seed already lives at the softmax input
      case LayerKind::Dense: {
        const MatD& W = model.layer_params()[static_cast<size_t>(i)].W;
        if (weight_grad) {
          using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>;
          Eigen::Map<RowMat> dW(weight_grad->data() + offsets[i], l.out_dim,
                                l.in_dim);
          dW.noalias() += g * x.transpose();
          Eigen::Map<VecD> db(
              weight_grad->data() + offsets[i] + l.out_dim * l.in_dim,
              l.out_dim);
          db += g;
        }
        g = W.transpose() * g;
        break;
      }
      case LayerKind::Conv: {
        const MatD& K = model.layer_params()[static_cast<size_t>(i)].W;
        const int hw = in.h * in.w;
        MatD gout(l.out_channels, hw);
        for (int oc = 0; oc < l.out_channels; ++oc)
          gout.row(oc) = g.segment(oc * hw, hw).transpose();
        if (weight_grad) {
          const MatD& cols = trace.conv_cols[static_cast<size_t>(i)];
          const int kk = l.in_channels * l.kernel * l.kernel;
          using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>;
          Eigen::Map<RowMat> dK(weight_grad->data() + offsets[i],
                                l.out_channels, kk);
          dK.noalias() += gout * cols.transpose();
          Eigen::Map<VecD> db(
              weight_grad->data() + offsets[i] + l.out_channels * kk,
              l.out_channels);
          db += gout.rowwise().sum();
        }
        MatD dcols = K.transpose() * gout;
        VecD dx = VecD::Zero(in.size());
        col2im_add(dcols, in.c, in.h, in.w, l.kernel, dx.data());
        g.swap(dx);
        break;
      }
      case LayerKind::Relu: {
        for (Eigen::Index j = 0; j < g.size(); ++j)
          if (x[j] <= 0.0) g[j] = 0.0;  // subgradient 0 at the kink
        break;
      }
      case LayerKind::MaxPool: {
        VecD dx = VecD::Zero(in.size());
        const auto& src = trace.pool_src[static_cast<size_t>(i)];
        for (size_t j = 0; j < src.size(); ++j)
          dx[src[j]] += g[static_cast<Eigen::Index>(j)];
        g.swap(dx);
        break;
      }
      case LayerKind::Flatten:
        break;
    }
  }
  return static_cast<double>(spec.input_scale) * g;
}

GradientReport input_gradient(const Model& model, const Image& image,
                              const LossSpec& loss) {
  const ForwardTrace trace = forward_trace(model, image);
  const double value = loss_from_probs(trace.probs, loss);
  const VecD seed = loss_logit_gradient(trace.probs, loss);
  GradientReport report;
  report.grad = backward_from_logits(model, trace, seed);
  report.loss_value = value;
  return report;
}

VecD probability_gradient(const Model& model, const Image& image, int label,
                          double* prob_out) {
  const ForwardTrace trace = forward_trace(model, image);
  if (label < 0 || label >= static_cast<int>(trace.probs.size()))
    throw RangeError("class index " + std::to_string(label) + " out of range");
  const double p = trace.probs[label];
  if (prob_out) *prob_out = p;
  // d softmax[label] / d logit_j = p * (1{j==label} - p_j)
  VecD seed = -p * trace.probs;
  seed[label] += p;
  return backward_from_logits(model, trace, seed);
}

std::uint64_t gradient_eval_count() {
  return g_grad_evals.load(std::memory_order_relaxed);
}

}  // namespace advlab
