#pragma once

#include "advlab/image.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace advlab {

enum class LayerKind { Dense, Conv, Relu, MaxPool, Flatten, Softmax };

const char* layer_kind_name(LayerKind kind);

/// One layer of the fixed vocabulary. Conv is stride 1 with zero "same"
/// padding (odd kernel); MaxPool is 2x2 with stride 2.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int in_dim = 0;
  int out_dim = 0;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
};

LayerSpec dense_layer(int in_dim, int out_dim);
LayerSpec conv_layer(int in_channels, int out_channels, int kernel);
LayerSpec relu_layer();
LayerSpec maxpool_layer();
LayerSpec flatten_layer();
LayerSpec softmax_layer();

struct ModelSpec {
  std::string name;
  ImageShape input;
  int num_classes = 0;
  // The network consumes input_scale * pixel + input_shift; attacks and all
  // reported distances stay in raw [0, 255] pixel space.
  float input_scale = 1.0f;
  float input_shift = 0.0f;
  std::vector<LayerSpec> layers;

  int weight_count() const;

  /// Checks layer-to-layer shape compatibility and that the final layer is a
  /// softmax over num_classes. Throws ShapeError naming the offending layer.
  void validate() const;

  std::string canonical_text() const;
  static ModelSpec parse_canonical(const std::string& text);
};

/// Builds one of the stock architectures: dense2, dense3, conv_small,
/// conv_wide, conv_deep, conv_blackbox. All share a 1x16x16 input and 10
/// classes.
ModelSpec stock_model_spec(const std::string& arch, const std::string& name = "");

/// The five architectures used as attack sources and evaluators.
const std::vector<std::string>& stock_architectures();

struct Prediction {
  VecF probs;
  VecF logits;

  /// Argmax over logits; ties resolve to the lowest class index.
  int top1() const;
};

struct LossSpec {
  enum class Kind { Nontargeted, Targeted };
  Kind kind = Kind::Nontargeted;
  int label = 0;

  static LossSpec nontargeted(int y) { return {Kind::Nontargeted, y}; }
  static LossSpec targeted(int y_star) { return {Kind::Targeted, y_star}; }
};

struct GradientReport {
  VecD grad;  // d loss / d pixel, length N
  double loss_value = 0.0;
};

struct LayerParams {
  MatD W;  // Dense: out x in. Conv: out_channels x (in_channels*k*k).
  VecD b;
};

/// Immutable classifier: a ModelSpec plus a flat float32 weight vector.
/// Double-precision parameter matrices are materialized once at construction;
/// the flat vector stays the canonical form for serialization and equality.
class Model {
 public:
  Model(ModelSpec spec, VecF weights);

  const ModelSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  const VecF& weights() const { return weights_; }
  const std::vector<LayerParams>& layer_params() const { return params_; }
  int num_classes() const { return spec_.num_classes; }
  const ImageShape& input_shape() const { return spec_.input; }

 private:
  ModelSpec spec_;
  VecF weights_;
  std::vector<LayerParams> params_;
};

/// He-style seeded initialization (normal weights, zero biases).
VecF initial_weights(const ModelSpec& spec, std::uint64_t seed);

VecD softmax(const VecD& logits);

Prediction forward(const Model& model, const Image& image);

double loss_nontargeted(const Prediction& pred, int y);
double loss_targeted(const Prediction& pred, int y_star);
double loss_value(const Prediction& pred, const LossSpec& loss);

/// Loss evaluated from the double-precision forward pass (the value
/// input_gradient reports); finite-difference checks difference this.
double loss_value_at(const Model& model, const Image& image,
                     const LossSpec& loss);

/// Exact reverse-mode gradient of the selected loss with respect to every
/// raw pixel.
GradientReport input_gradient(const Model& model, const Image& image,
                              const LossSpec& loss);

/// d probs[label] / d pixel; prob_out receives probs[label] when non-null.
VecD probability_gradient(const Model& model, const Image& image, int label,
                          double* prob_out = nullptr);

/// Number of backward passes performed process-wide. Attack tests use the
/// delta around a call to count gradient evaluations.
std::uint64_t gradient_eval_count();

// --- lower-level pieces shared by training and the gradient ops ---

struct ForwardTrace {
  std::vector<VecD> acts;  // acts[0] = normalized input, acts[i+1] = layer i out
  std::vector<MatD> conv_cols;
  std::vector<std::vector<int>> pool_src;
  VecD logits;  // input of the final softmax
  VecD probs;   // clamped softmax output
};

ForwardTrace forward_trace(const Model& model, const Image& image);
Prediction prediction_from_trace(const ForwardTrace& trace);

/// d loss / d logits for the two losses, evaluated on double probabilities.
VecD loss_logit_gradient(const VecD& probs, const LossSpec& loss);

/// Back-propagates a gradient seeded at the softmax input down to the raw
/// pixels. When weight_grad is non-null, parameter gradients are accumulated
/// into it (same layout as Model::weights()).
VecD backward_from_logits(const Model& model, const ForwardTrace& trace,
                          const VecD& dlogits, VecD* weight_grad = nullptr);

}  // namespace advlab
