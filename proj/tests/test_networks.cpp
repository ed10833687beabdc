#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "rtn/gradcheck.hpp"
#include "rtn/networks.hpp"
#include "test_util.hpp"

using namespace rtn;
using namespace rtn::nn;
using rtn::testing::random_tensor;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("rtn_test_networks_" + name);
  fs::remove_all(p);
  return p;
}

ModelConfig small_config(ModelKind kind, std::uint64_t seed = 7) {
  ModelConfig c;
  c.kind = kind;
  c.frame_len = 16;
  c.n_classes = 2;
  c.seed = seed;
  c.classifier = parse_layers({"real_conv:4:3:same", "relu", "flatten", "dense:classes", "softmax"});
  c.localization = parse_layers({"complex_conv:2:3:same", "polar", "flatten", "dense:5"});
  return c;
}

Tensor<float> random_frames(std::size_t b, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor<float>({b, 2, n}, rng);
}

}  // namespace

TEST(LayerSpec, ParsesAndPrintsRoundTrip) {
  for (std::string text : {"real_conv:64:8:same", "complex_conv:32:8:valid", "dense:128", "dense:classes", "polar",
                           "flatten", "relu", "dropout", "softmax"}) {
    EXPECT_EQ(LayerSpec::parse(text).str(), text);
  }
  EXPECT_EQ(LayerSpec::parse("real_conv:3:5").padding, Padding::same);
}

TEST(LayerSpec, RejectsMalformedText) {
  for (std::string text : {"", "conv:3:3", "dense", "dense:-1", "real_conv:3", "real_conv:3:3:full", "relu:2"}) {
    EXPECT_THROW(LayerSpec::parse(text), InvalidInput) << text;
  }
}

TEST(Model, DefaultBaselineOutputsProbabilitiesPerClass) {
  Model<float> model(ModelConfig{});
  auto out = forward_classify(model, random_frames(3, 128, 1));
  ASSERT_EQ(out.probs.shape(), (Shape{3, 11}));
  for (std::size_t b = 0; b < 3; ++b) {
    float s = 0;
    for (std::size_t c = 0; c < 11; ++c) {
      EXPECT_GE(out.probs.at(b, c), 0.0f);
      s += out.probs.at(b, c);
    }
    EXPECT_NEAR(s, 1.0f, 1e-5);
  }
  EXPECT_FALSE(out.theta.has_value());
}

TEST(Model, DefaultArchitectureParameterShapes) {
  ModelConfig cfg;
  cfg.kind = ModelKind::rtn;
  Model<float> model(cfg);
  std::vector<Shape> shapes;
  for (const auto& p : model.params()) shapes.push_back(p.value.shape());
  const std::vector<Shape> expected{
      {32, 2, 8}, {64 * 128, 64}, {64}, {64, 5}, {5},               // localization
      {64, 2, 8}, {64, 1}, {16, 64, 8}, {16, 1}, {16 * 128, 128}, {128}, {128, 11}, {11}};  // classifier
  EXPECT_EQ(shapes, expected);
  EXPECT_EQ(model.n_localization_params(), 5u);
}

TEST(Model, InferenceIsBitwiseDeterministic) {
  ModelConfig cfg;
  cfg.kind = ModelKind::rtn;
  Model<float> a(cfg), b(cfg);
  const auto x = random_frames(4, 128, 2);
  EXPECT_EQ(forward_classify(a, x).probs, forward_classify(b, x).probs);
  EXPECT_EQ(forward_classify(a, x).probs, forward_classify(a, x).probs);
}

TEST(Model, RtnStartsAtIdentityAndMatchesBaseline) {
  ModelConfig cfg;
  cfg.seed = 11;
  auto base = build_baseline<float>(cfg);
  auto rtn_model = build_rtn<float>(cfg);
  const auto x = random_frames(8, 128, 3);
  auto r = forward_classify(rtn_model, x);
  auto b = forward_classify(base, x);
  ASSERT_TRUE(r.theta.has_value());
  for (std::size_t i = 0; i < 8; ++i) {
    const float expect[5] = {1, 1, 0, 0, 0};
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(r.theta->at(i, k), expect[k]);
  }
  EXPECT_EQ(*r.transformed, x);
  EXPECT_LE(max_abs_diff(r.probs, b.probs), 1e-5f);
}

TEST(Model, HandlesFullTrainingBatch) {
  ModelConfig cfg;
  cfg.kind = ModelKind::rtn;
  Model<float> model(cfg);
  auto out = forward_classify(model, random_frames(1024, 128, 4));
  EXPECT_EQ(out.probs.shape(), (Shape{1024, 11}));
  EXPECT_TRUE(out.probs.all_finite());
}

TEST(Model, LocalizationReceivesGradient) {
  ModelConfig cfg;
  cfg.kind = ModelKind::rtn;
  Model<float> model(cfg);
  Tape<float> tape(true, 5);
  auto params = model.bind(tape, true);
  auto out = model.forward(tape.constant(random_frames(4, 128, 5)), params, 0.5f);
  Tensor<float> targets({4, 11});
  for (std::size_t b = 0; b < 4; ++b) targets.at(b, b) = 1;
  tape.backward(ad::categorical_cross_entropy(out.probs, targets));
  // The final localization layer starts at zero weights, so only it (not the
  // layers feeding it) sees a gradient on the first step.
  const std::size_t n_loc = model.n_localization_params();
  for (std::size_t i = n_loc - 2; i < n_loc; ++i) {
    float mag = 0;
    for (float v : tape.grad(params[i]).data()) mag = std::max(mag, std::abs(v));
    EXPECT_GT(mag, 0.0f) << model.params()[i].name;
  }
}

TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  for (ModelKind kind : {ModelKind::baseline, ModelKind::rtn}) {
    Model<double> model(small_config(kind));
    std::mt19937_64 rng(21);
    // Move away from the identity so every localization weight matters.
    for (auto& p : model.params()) {
      for (auto& v : p.value.data()) v += 0.05 * std::uniform_real_distribution<double>(-1, 1)(rng);
    }
    std::vector<Tensor<double>> point;
    for (const auto& p : model.params()) point.push_back(p.value);
    const auto x = random_tensor<double>({3, 2, 16}, rng);
    Tensor<double> targets({3, 2});
    targets.at(0, 0) = targets.at(1, 1) = targets.at(2, 0) = 1;
    auto fn = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> params) {
      auto out = model.forward(tape.constant(x), params, 0.0);
      return ad::categorical_cross_entropy(out.probs, targets);
    };
    auto report = ad::grad_check(fn, point, 1e-6, 1e-4);
    EXPECT_TRUE(report.pass) << to_string(kind) << " worst " << model.params()[report.worst_input].name << "["
                             << report.worst_element << "] analytic " << report.analytic << " numeric "
                             << report.numeric;
  }
}

TEST(Model, SameSeedSharesClassifierWeights) {
  ModelConfig cfg;
  cfg.seed = 3;
  auto base = build_baseline<float>(cfg);
  auto r = build_rtn<float>(cfg);
  for (std::size_t i = 0; i < base.params().size(); ++i) {
    EXPECT_EQ(base.params()[i].value, r.params()[r.n_localization_params() + i].value);
  }
  cfg.seed = 4;
  EXPECT_NE(build_baseline<float>(cfg).params()[0].value, base.params()[0].value);
}

TEST(Model, RejectsInconsistentConfigurations) {
  auto expect_invalid = [](ModelConfig c, const std::string& fragment) {
    try {
      Model<float> m(c);
      FAIL() << "expected rejection containing '" << fragment << "'";
    } catch (const InvalidInput& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  auto c = small_config(ModelKind::baseline);
  c.classifier = parse_layers({"real_conv:4:3:same", "dense:2", "softmax"});
  expect_invalid(c, "add flatten");
  c = small_config(ModelKind::baseline);
  c.classifier = parse_layers({"flatten", "dense:3", "softmax"});
  expect_invalid(c, "softmax over 2 classes");
  c = small_config(ModelKind::baseline);
  c.classifier = parse_layers({"flatten", "dense:2"});
  expect_invalid(c, "softmax");
  c = small_config(ModelKind::rtn);
  c.localization = parse_layers({"flatten", "dense:4"});
  expect_invalid(c, "5 outputs");
  c = small_config(ModelKind::rtn);
  c.localization = parse_layers({"real_conv:3:3", "complex_conv:2:3", "flatten", "dense:5"});
  expect_invalid(c, "I/Q");
  c = small_config(ModelKind::baseline);
  c.classifier = parse_layers({"real_conv:2:40:valid", "flatten", "dense:2", "softmax"});
  expect_invalid(c, "taps exceed length");

  Model<float> ok(small_config(ModelKind::baseline));
  EXPECT_THROW(forward_classify(ok, random_frames(2, 32, 1)), InvalidInput);
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelConfig cfg = small_config(ModelKind::rtn, 99);
  cfg.polar_mode = radio::Atan2Mode::verbatim;
  Model<float> model(cfg);
  std::mt19937_64 rng(8);
  for (auto& p : model.params()) p.value = random_tensor<float>(p.value.shape(), rng);

  Checkpoint ck{cfg, {{"epoch", "12"}, {"lr", "0.0005"}}, {}};
  store_params(ck, model);
  ck.tensors["adam.m.extra"] = Tensor<float>::from({2}, {1.5f, -2.25f});
  const auto dir = scratch_dir("roundtrip");
  save_checkpoint(ck, dir);

  const Checkpoint back = load_checkpoint(dir);
  EXPECT_EQ(back.config, cfg);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.tensors, ck.tensors);
  Model<float> restored = model_from_checkpoint(back);
  const auto x = random_frames(2, 16, 9);
  EXPECT_EQ(forward_classify(restored, x).probs, forward_classify(model, x).probs);
  fs::remove_all(dir);
}

TEST(Checkpoint, ReportsTruncatedTensor) {
  Model<float> model(small_config(ModelKind::baseline));
  Checkpoint ck{model.config(), {}, {}};
  store_params(ck, model);
  const auto dir = scratch_dir("truncated");
  save_checkpoint(ck, dir);
  const auto victim = dir / "tensors" / ("param." + model.params()[0].name + ".f32");
  fs::resize_file(victim, 8);
  try {
    load_checkpoint(dir);
    FAIL() << "expected truncated tensor to be rejected";
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("found 8"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_checkpoint(dir / "nowhere"), InvalidInput);
  fs::remove_all(dir);
}
