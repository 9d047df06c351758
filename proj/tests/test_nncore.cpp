#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "advlab/config.hpp"
#include "advlab/serialize.hpp"
#include "advlab/training.hpp"
#include "test_support.hpp"

#include <cstring>

using namespace advlab;
using namespace advlab::testing;

namespace {

Model softmax_only(int classes) {
  ModelSpec spec;
  spec.name = "softmax_only";
  spec.input = {classes, 1, 1};
  spec.num_classes = classes;
  spec.layers = {softmax_layer()};
  return Model(spec, VecF(0));
}

Prediction prediction_with_probs(std::vector<float> probs) {
  Prediction pred;
  pred.probs = Eigen::Map<VecF>(probs.data(), static_cast<Eigen::Index>(probs.size()));
  pred.logits = pred.probs;
  return pred;
}

/// Bright-vs-dark two-class toy set; both intensity bands are separated by a
/// margin checked exhaustively where the test needs it.
Dataset two_class_toy(int count, std::uint64_t seed) {
  Dataset data;
  data.num_classes = 2;
  data.shape = {4, 1, 1};
  data.provenance = "toy";
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    const int cls = i % 2;
    VecF px(4);
    for (int j = 0; j < 4; ++j) {
      const double base = cls == 0 ? 60.0 : 190.0;
      px[j] = static_cast<float>(base + rng.uniform(-25.0, 25.0));
    }
    LabeledExample e;
    e.image = make_image(data.shape, std::move(px));
    e.ground_truth = cls;
    e.target_label = 1 - cls;
    data.examples.push_back(std::move(e));
  }
  return data;
}

}  // namespace

TEST_CASE("softmax layer symmetry and shift invariance") {
  const Model m2 = softmax_only(2);
  const Image zeros = make_image({2, 1, 1}, VecF::Zero(2));
  const Prediction p = forward(m2, zeros);
  CHECK(p.probs[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(p.probs[1] == doctest::Approx(0.5).epsilon(1e-9));

  const Model m4 = softmax_only(4);
  for (float c : {-7.5f, 0.0f, 3.25f}) {
    const Image img = make_image({4, 1, 1}, VecF::Constant(4, c));
    const Prediction pred = forward(m4, img);
    for (int i = 0; i < 4; ++i)
      CHECK(pred.probs[i] == doctest::Approx(0.25).epsilon(1e-9));
  }
}

TEST_CASE("softmax output sums to one and argmax matches logits") {
  Rng rng(11);
  for (const std::string& arch : stock_architectures()) {
    const ModelSpec spec = stock_model_spec(arch);
    const Model model(spec, initial_weights(spec, rng.next_u64()));
    for (int rep = 0; rep < 5; ++rep) {
      const Image img = uniform_random_image(spec.input, rng);
      const Prediction pred = forward(model, img);
      double total = 0.0;
      for (int i = 0; i < spec.num_classes; ++i) {
        CHECK(pred.probs[i] > 0.0f);
        CHECK(pred.probs[i] < 1.0f);
        total += pred.probs[i];
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
      int logit_arg = 0;
      for (int i = 1; i < spec.num_classes; ++i)
        if (pred.logits[i] > pred.logits[logit_arg]) logit_arg = i;
      CHECK(pred.top1() == logit_arg);
    }
  }
}

TEST_CASE("forward matches the naive per-layer oracle") {
  Rng rng(23);
  for (const std::string& arch : stock_architectures()) {
    const ModelSpec spec = stock_model_spec(arch);
    const VecF weights = initial_weights(spec, rng.next_u64());
    const Model model(spec, weights);
    for (int rep = 0; rep < 3; ++rep) {
      const Image img = uniform_random_image(spec.input, rng);
      const Prediction pred = forward(model, img);
      const auto oracle = naive_forward_probs(spec, weights, img.pixels);
      for (int i = 0; i < spec.num_classes; ++i)
        CHECK(static_cast<double>(pred.probs[i]) ==
              doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-6));
    }
  }
}

TEST_CASE("forward is pure and rejects shape mismatches") {
  const ModelSpec spec = stock_model_spec("conv_small");
  const Model model(spec, initial_weights(spec, 7));
  Rng rng(7);
  const Image img = uniform_random_image(spec.input, rng);
  const Prediction a = forward(model, img);
  const Prediction b = forward(model, img);
  CHECK(a.logits == b.logits);
  CHECK(a.probs == b.probs);

  const Image bad = make_image({1, 8, 8}, VecF::Zero(64));
  CHECK_THROWS_AS(forward(model, bad), ShapeError);
}

TEST_CASE("model spec validation names the offending layer") {
  ModelSpec spec;
  spec.name = "broken";
  spec.input = {1, 16, 16};
  spec.num_classes = 10;
  spec.layers = {flatten_layer(), dense_layer(99, 10), softmax_layer()};
  try {
    spec.validate();
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 1 (dense)") != std::string::npos);
  }
}

TEST_CASE("non-targeted loss values") {
  CHECK(loss_nontargeted(prediction_with_probs({0.5f, 0.5f}), 0) ==
        doctest::Approx(std::log(0.5)).epsilon(1e-9));
  CHECK(loss_nontargeted(prediction_with_probs({0.0f, 1.0f}), 0) ==
        doctest::Approx(0.0).epsilon(1e-9));
  // Clamping pins the divergent endpoint at log(eps).
  CHECK(loss_nontargeted(prediction_with_probs({1.0f, 0.0f}), 0) ==
        doctest::Approx(std::log(1e-12)).epsilon(1e-6));
  CHECK_THROWS_AS(loss_nontargeted(prediction_with_probs({1.0f, 0.0f}), 5),
                  RangeError);
}

TEST_CASE("targeted loss values") {
  CHECK(loss_targeted(prediction_with_probs({1.0f, 0.0f}), 0) ==
        doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss_targeted(prediction_with_probs({0.5f, 0.5f}), 0) ==
        doctest::Approx(-std::log(0.5)).epsilon(1e-9));
  CHECK(loss_targeted(prediction_with_probs({0.0f, 1.0f}), 0) ==
        doctest::Approx(-std::log(1e-12)).epsilon(1e-6));
  CHECK_THROWS_AS(loss_targeted(prediction_with_probs({0.5f, 0.5f}), -1),
                  RangeError);
}

TEST_CASE("input gradient matches central finite differences") {
  Rng rng(42);
  for (const std::string& arch : stock_architectures()) {
    const ModelSpec spec = stock_model_spec(arch);
    const Model model(spec, initial_weights(spec, rng.next_u64()));
    for (int rep = 0; rep < 3; ++rep) {
      const Image img = uniform_random_image(spec.input, rng);
      const LossSpec loss = rep % 2 == 0 ? LossSpec::nontargeted(rep % 10)
                                         : LossSpec::targeted(rep % 10);
      const GradientReport report = input_gradient(model, img, loss);
      const VecD fd = fd_input_gradient(model, img, loss, 1e-3, &report.grad);
      CHECK(rel_error_inf(report.grad, fd) < 1e-4);
    }
  }
}

TEST_CASE("linear-softmax cross-entropy gradient has the closed form") {
  const int in = 6, out = 4;
  Rng rng(5);
  std::vector<float> w(static_cast<size_t>(in) * out);
  for (float& v : w) v = static_cast<float>(rng.normal() * 0.05);
  const Model model =
      linear_softmax_model(in, out, w, std::vector<float>(out, 0.0f));

  const Image img = uniform_random_image({in, 1, 1}, rng);
  const int y_star = 2;
  const GradientReport report =
      input_gradient(model, img, LossSpec::targeted(y_star));

  const ForwardTrace trace = forward_trace(model, img);
  VecD delta = trace.probs;
  delta[y_star] -= 1.0;
  const VecD expected = model.layer_params()[0].W.transpose() * delta;
  for (int i = 0; i < in; ++i)
    CHECK(report.grad[i] == doctest::Approx(expected[i]).epsilon(1e-9));
}

TEST_CASE("constant model has zero input gradient") {
  ModelSpec spec = stock_model_spec("dense2", "zeros");
  const Model model(spec, VecF::Zero(spec.weight_count()));
  Rng rng(3);
  const Image img = uniform_random_image(spec.input, rng);
  const GradientReport report =
      input_gradient(model, img, LossSpec::nontargeted(0));
  CHECK(report.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training separates a linearly separable toy set") {
  const Dataset toy = two_class_toy(200, 99);
  // Exhaustive margin check: every class-1 pixel sum exceeds every class-0
  // pixel sum, so a linear threshold on the sum separates the classes.
  double max0 = -1e300, min1 = 1e300;
  for (const auto& e : toy.examples) {
    const double total = e.image.pixels.sum();
    if (e.ground_truth == 0)
      max0 = std::max(max0, total);
    else
      min1 = std::min(min1, total);
  }
  REQUIRE(max0 < min1);

  ModelSpec spec;
  spec.name = "toy_linear";
  spec.input = toy.shape;
  spec.num_classes = 2;
  spec.input_scale = 1.0f / 255.0f;
  spec.layers = {dense_layer(4, 2), softmax_layer()};

  TrainHyperparams hp;
  hp.epochs = 40;
  hp.batch_size = 16;
  hp.learning_rate = 0.2;
  hp.accuracy_floor = 0.99;
  hp.seed = 1;
  const Model model = train(spec, toy, hp);
  CHECK(accuracy(model, toy.examples) >= 0.99);
}

TEST_CASE("training is deterministic given a seed") {
  const Dataset toy = two_class_toy(120, 5);
  ModelSpec spec;
  spec.name = "toy_det";
  spec.input = toy.shape;
  spec.num_classes = 2;
  spec.input_scale = 1.0f / 255.0f;
  spec.layers = {dense_layer(4, 8), relu_layer(), dense_layer(8, 2),
                 softmax_layer()};
  TrainHyperparams hp;
  hp.epochs = 10;
  hp.accuracy_floor = 0.0;
  hp.seed = 77;
  const Model a = train(spec, toy, hp);
  const Model b = train(spec, toy, hp);
  REQUIRE(a.weights().size() == b.weights().size());
  CHECK(std::memcmp(a.weights().data(), b.weights().data(),
                    sizeof(float) * static_cast<size_t>(a.weights().size())) == 0);
}

TEST_CASE("training reports a convergence failure with the final accuracy") {
  const Dataset data = generate_dataset("shapes10", 4, 200);
  ModelSpec spec = stock_model_spec("dense2", "undertrained");
  TrainHyperparams hp;
  hp.epochs = 1;
  hp.learning_rate = 1e-9;
  hp.accuracy_floor = 0.95;
  hp.seed = 2;
  try {
    train(spec, data, hp);
    FAIL("expected a convergence error");
  } catch (const ConvergenceError& e) {
    CHECK(e.final_accuracy < 0.95);
  }
}

TEST_CASE("every stock architecture clears the training floor") {
  const Config cfg;  // default counts and hyperparameters
  const Dataset data = generate_dataset("shapes10", Rng::mix(cfg.seed, 0xda7aU),
                                        cfg.data.train_count,
                                        cfg.data.noise_std);
  TrainHyperparams hp;
  hp.epochs = cfg.train.epochs;
  hp.batch_size = cfg.train.batch;
  hp.learning_rate = cfg.train.learning_rate;
  hp.momentum = cfg.train.momentum;
  hp.accuracy_floor = 0.95;
  for (const std::string& arch : stock_architectures()) {
    hp.seed = Rng::mix(1, crc32_str(arch));
    const Model model = train(stock_model_spec(arch), data, hp);
    CHECK(accuracy(model, data.examples) >= 0.95);
  }
}

TEST_CASE("model files round-trip bit-exactly") {
  const ModelSpec spec = stock_model_spec("conv_deep");
  const Model model(spec, initial_weights(spec, 31));
  const std::string bytes = encode_model(model);
  const Model loaded = decode_model(bytes);
  CHECK(loaded.spec().canonical_text() == spec.canonical_text());
  REQUIRE(loaded.weights().size() == model.weights().size());
  CHECK(std::memcmp(loaded.weights().data(), model.weights().data(),
                    sizeof(float) * static_cast<size_t>(model.weights().size())) == 0);
  CHECK(encode_model(loaded) == bytes);
}

TEST_CASE("model files reject corruption, truncation, and future versions") {
  const ModelSpec spec = stock_model_spec("dense2");
  const Model model(spec, initial_weights(spec, 8));
  const std::string bytes = encode_model(model);

  std::string corrupt = bytes;
  corrupt[corrupt.size() / 2] = static_cast<char>(corrupt[corrupt.size() / 2] + 1);
  CHECK_THROWS_AS(decode_model(corrupt), SerializationError);

  CHECK_THROWS_AS(decode_model(bytes.substr(0, bytes.size() / 3)),
                  SerializationError);

  std::string future = bytes;
  future[4] = 2;  // bump the u16 version
  try {
    decode_model(future);
    FAIL("expected a version error");
  } catch (const SerializationError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
}

TEST_CASE("dataset generation is deterministic and class-balanced") {
  const Dataset a = generate_dataset("shapes10", 123, 50);
  const Dataset b = generate_dataset("shapes10", 123, 50);
  CHECK(encode_dataset(a) == encode_dataset(b));

  const Dataset ten = generate_dataset("shapes10", 9, 10);
  std::vector<int> counts(10, 0);
  for (const auto& e : ten.examples) counts[static_cast<size_t>(e.ground_truth)]++;
  for (int c : counts) CHECK(c == 1);

  CHECK_THROWS_AS(generate_dataset("unknown", 1, 10), ConfigError);
}

TEST_CASE("dataset files round-trip and reject corruption") {
  const Dataset data = generate_dataset("shapes10", 3, 30);
  const std::string bytes = encode_dataset(data);
  const Dataset loaded = decode_dataset(bytes);
  CHECK(encode_dataset(loaded) == bytes);

  std::string corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(decode_dataset(corrupt), SerializationError);
}

TEST_CASE("test-set selection filters, verifies, and reports shortfalls") {
  const Dataset toy = two_class_toy(60, 21);
  // A handcrafted classifier that thresholds the pixel sum separates the toy
  // set perfectly, so selection draws from the whole dataset.
  // Class 1 wins exactly when the pixel sum exceeds 500, which splits the
  // two intensity bands.
  const Model perfect = linear_softmax_model(
      4, 2, {-0.1f, -0.1f, -0.1f, -0.1f, 0.1f, 0.1f, 0.1f, 0.1f},
      {0.0f, -100.0f});
  REQUIRE(accuracy(perfect, toy.examples) == 1.0);

  const TestSet set = select_test_set({&perfect}, toy, 17, 20);
  CHECK(set.size() == 20);
  set.verify({&perfect}, toy);
  for (size_t i = 0; i < set.ids.size(); ++i) {
    const auto& e = toy.examples[static_cast<size_t>(set.ids[i])];
    CHECK(set.targets[i] != e.ground_truth);
  }

  CHECK_THROWS_AS(select_test_set({&perfect}, toy, 17, 1000), ShortfallError);
  try {
    select_test_set({&perfect}, toy, 17, 1000);
  } catch (const ShortfallError& e) {
    CHECK(e.found == 60);
  }
}
