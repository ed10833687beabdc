#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "rtn/autodiff.hpp"
#include "rtn/gradcheck.hpp"
#include "test_util.hpp"

using namespace rtn;
using namespace rtn::ad;
using rtn::testing::random_away_from_zero;
using rtn::testing::random_tensor;

namespace {

using PointGen = std::function<std::vector<Tensor<double>>(std::mt19937_64&)>;

// Runs grad_check at ten random points. The output is contracted with a
// random weight tensor so that no gradient entry is trivially constant.
void expect_gradients(const std::string& name, const PointGen& gen,
                      const std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>& op) {
  std::mt19937_64 rng(std::hash<std::string>{}(name));
  for (int trial = 0; trial < 10; ++trial) {
    auto point = gen(rng);
    Tape<double> probe;
    std::vector<Var<double>> leaves;
    for (auto& p : point) leaves.push_back(probe.leaf(p, false));
    Shape out_shape = op(probe, leaves).shape();
    Tensor<double> weights = random_tensor(out_shape, rng, 0.5, 1.5);
    auto weighted = [&](Tape<double>& t, std::span<const Var<double>> in) {
      return sum(op(t, in) * t.constant(weights));
    };
    GradCheckReport r = grad_check(weighted, point, 1e-4, 1e-4);
    EXPECT_TRUE(r.pass) << name << " trial " << trial << ": rel err " << r.max_rel_error << " analytic "
                        << r.analytic << " numeric " << r.numeric;
  }
}

PointGen uniform(std::vector<Shape> shapes, double lo = -2.0, double hi = 2.0) {
  return [=](std::mt19937_64& rng) {
    std::vector<Tensor<double>> pts;
    for (const auto& s : shapes) pts.push_back(random_tensor(s, rng, lo, hi));
    return pts;
  };
}

PointGen nonzero(std::vector<Shape> shapes, double margin = 0.1) {
  return [=](std::mt19937_64& rng) {
    std::vector<Tensor<double>> pts;
    for (const auto& s : shapes) pts.push_back(random_away_from_zero(s, rng, margin));
    return pts;
  };
}

}  // namespace

TEST(Forward, ScalarArithmetic) {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>::scalar(2.0));
  auto b = t.leaf(Tensor<double>::scalar(3.0));
  EXPECT_EQ((a + b).value().item(), 5.0);
  auto x = t.leaf(Tensor<double>::scalar(3.0));
  EXPECT_EQ((x * x).value().item(), 9.0);
}

TEST(Forward, ValidConvolutionIsCorrelation) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{1, 1, 3}, {1, 2, 3}));
  auto w = t.leaf(Tensor<double>(Shape{1, 1, 2}, {1, 1}));
  auto y = conv1d(x, w, Padding::valid);
  EXPECT_EQ(y.value(), Tensor<double>(Shape{1, 1, 2}, {3, 5}));

  // An asymmetric kernel distinguishes correlation from flipped convolution.
  auto w2 = t.leaf(Tensor<double>(Shape{1, 1, 2}, {1, 0}));
  EXPECT_EQ(conv1d(x, w2, Padding::valid).value(), Tensor<double>(Shape{1, 1, 2}, {1, 2}));
}

TEST(Forward, ConvolutionMatchesSlidingWindow) {
  std::mt19937_64 rng(5);
  for (Padding pad : {Padding::valid, Padding::same}) {
    auto xv = random_tensor(Shape{3, 4, 11}, rng);
    auto wv = random_tensor(Shape{5, 4, 4}, rng);
    Tape<double> t;
    auto y = conv1d(t.leaf(xv), t.leaf(wv), pad).value();
    auto [left, right] = padding_amounts(pad, 4);
    const std::size_t L = 11 + left + right - 4 + 1;
    ASSERT_EQ(y.shape(), (Shape{3, 5, L}));
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t o = 0; o < 5; ++o)
        for (std::size_t n = 0; n < L; ++n) {
          double acc = 0;
          for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t k = 0; k < 4; ++k) {
              long src = static_cast<long>(n + k) - static_cast<long>(left);
              if (src >= 0 && src < 11) acc += xv.at(b, c, src) * wv.at(o, c, k);
            }
          EXPECT_NEAR(y.at(b, o, n), acc, 1e-12);
        }
  }
}

TEST(Forward, SamePaddingKeepsLength) {
  EXPECT_EQ(conv_output_length(128, 8, Padding::same), 128u);
  EXPECT_EQ(conv_output_length(128, 8, Padding::valid), 121u);
  EXPECT_EQ(padding_amounts(Padding::same, 8), (std::pair<std::size_t, std::size_t>{3, 4}));
}

TEST(Forward, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(1);
  Tape<double> t;
  auto p = softmax(t.leaf(random_tensor(Shape{6, 11}, rng, -10, 10))).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 11; ++c) s += p.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, BroadcastingAddsRowVector) {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = t.leaf(Tensor<double>(Shape{3}, {10, 20, 30}));
  EXPECT_EQ((a + b).value(), Tensor<double>(Shape{2, 3}, {11, 22, 33, 14, 25, 36}));
  auto c = t.leaf(Tensor<double>(Shape{2, 1}, {100, 200}));
  EXPECT_EQ((a + c).value(), Tensor<double>(Shape{2, 3}, {101, 102, 103, 204, 205, 206}));
}

TEST(Forward, SliceConcatReshapeRoundTrip) {
  std::mt19937_64 rng(2);
  Tape<double> t;
  auto x = t.leaf(random_tensor(Shape{2, 5, 3}, rng));
  auto y = concat<double>({slice(x, 1, 0, 2), slice(x, 1, 2, 5)}, 1);
  EXPECT_EQ(y.value(), x.value());
  EXPECT_EQ(reshape(x, Shape{10, 3}).value().vec(), x.value().vec());
}

TEST(Forward, DropoutIsIdentityOutsideTraining) {
  std::mt19937_64 rng(3);
  Tape<double> t(false, 9);
  auto x = t.leaf(random_tensor(Shape{4, 8}, rng));
  EXPECT_EQ(dropout(x, 0.5).value(), x.value());
}

TEST(Forward, DropoutScalesSurvivors) {
  Tape<double> t(true, 9);
  auto x = t.leaf(Tensor<double>(Shape{10000}, 1.0));
  auto y = dropout(x, 0.25).value();
  std::size_t kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
      ++kept;
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 10000.0, 0.75, 0.02);
}

TEST(Backward, SquareDerivative) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>::scalar(3.0));
  t.backward(x * x);
  EXPECT_EQ(t.grad(x).item(), 6.0);
}

TEST(Backward, ClipOutsideRangeIsFlat) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>::scalar(2.0));
  t.backward(clip(x, 0.0, 1.0));
  EXPECT_EQ(t.grad(x).item(), 0.0);
}

TEST(Backward, SignHasZeroGradient) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{3}, {-1.0, 0.5, 2.0}));
  t.backward(sum(sign(x) * x));
  // Only the explicit multiplicand path contributes: d/dx (s * x) = s.
  EXPECT_EQ(t.grad(x), Tensor<double>(Shape{3}, {-1.0, 1.0, 1.0}));
}

TEST(Backward, PathsAccumulate) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>::scalar(2.0));
  auto y = x * x + x * 3.0 + exp(x);
  t.backward(y);
  EXPECT_NEAR(t.grad(x).item(), 2 * 2.0 + 3.0 + std::exp(2.0), 1e-12);
}

TEST(Backward, SoftmaxCrossEntropyMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto logits = random_tensor(Shape{1, 4}, rng, -3, 3);
    Tensor<double> target(Shape{1, 4});
    target[trial % 4] = 1.0;
    auto f = [&](Tape<double>&, std::span<const Var<double>> in) {
      return categorical_cross_entropy(softmax(in[0]), target);
    };
    auto r = grad_check(f, {logits}, 1e-4, 1e-4);
    EXPECT_TRUE(r.pass) << r.max_rel_error;
  }
}

TEST(Backward, SoftmaxCrossEntropyAnalyticForm) {
  // d/dz CE(softmax(z)) = p - y for a single example.
  std::mt19937_64 rng(12);
  auto logits = random_tensor(Shape{1, 4}, rng, -3, 3);
  Tensor<double> target(Shape{1, 4});
  target[2] = 1.0;
  Tape<double> t;
  auto z = t.leaf(logits);
  auto p = softmax(z);
  t.backward(categorical_cross_entropy(p, target));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(t.grad(z)[c], p.value()[c] - target[c], 1e-12);
}

TEST(Backward, CrossEntropyOfUniformPrediction) {
  Tape<double> t;
  auto p = t.leaf(Tensor<double>(Shape{2, 11}, 1.0 / 11.0));
  Tensor<double> y(Shape{2, 11});
  y.at(0, 3) = 1;
  y.at(1, 7) = 1;
  EXPECT_NEAR(categorical_cross_entropy(p, y).value().item(), std::log(11.0), 1e-12);
}

// ---- grad_check over every primitive ----

TEST(GradCheck, QuadraticPasses) {
  auto r = grad_check([](Tape<double>&, std::span<const Var<double>> in) { return in[0] * in[0]; },
                      {Tensor<double>::scalar(1.5)}, 1e-4, 1e-4);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ReluFlatRegion) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>::scalar(-1.0));
  t.backward(relu(x));
  EXPECT_EQ(t.grad(x).item(), 0.0);
  auto r = grad_check([](Tape<double>&, std::span<const Var<double>> in) { return relu(in[0]); },
                      {Tensor<double>::scalar(-1.0)});
  EXPECT_TRUE(r.pass);
}

TEST(GradCheck, ReportsFailureForWrongGradient) {
  // A primitive with a deliberately wrong backward must be caught.
  auto broken = [](Tape<double>& t, std::span<const Var<double>> in) {
    Var<double> x = in[0];
    Tensor<double> v = x.value();
    for (auto& e : v.data()) e = e * e;
    return t.record("broken_square", v, {x}, [x](Tape<double>& tp, const Tensor<double>& g) {
      auto& gx = tp.grad_buffer(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * tp.value(x.id)[i];  // missing factor 2
    });
  };
  auto r = grad_check(broken, {Tensor<double>::scalar(1.5)});
  EXPECT_FALSE(r.pass);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(GradCheck, Add) {
  expect_gradients("add", uniform({{3, 4}, {4}}), [](auto&, auto in) { return in[0] + in[1]; });
}
TEST(GradCheck, Subtract) {
  expect_gradients("subtract", uniform({{3, 1}, {3, 4}}), [](auto&, auto in) { return in[0] - in[1]; });
}
TEST(GradCheck, Multiply) {
  expect_gradients("multiply", uniform({{2, 3, 4}, {3, 1}}), [](auto&, auto in) { return in[0] * in[1]; });
}
TEST(GradCheck, Divide) {
  expect_gradients("divide", nonzero({{3, 4}, {3, 4}}, 0.5), [](auto&, auto in) { return in[0] / in[1]; });
}
TEST(GradCheck, Matmul) {
  expect_gradients("matmul", uniform({{3, 5}, {5, 2}}), [](auto&, auto in) { return matmul(in[0], in[1]); });
}
TEST(GradCheck, ConvValid) {
  expect_gradients("conv_valid", uniform({{2, 3, 9}, {4, 3, 3}}),
                   [](auto&, auto in) { return conv1d(in[0], in[1], Padding::valid); });
}
TEST(GradCheck, ConvSame) {
  expect_gradients("conv_same", uniform({{2, 2, 7}, {3, 2, 4}}),
                   [](auto&, auto in) { return conv1d(in[0], in[1], Padding::same); });
}
TEST(GradCheck, Pow) {
  expect_gradients("pow", uniform({{5}}), [](auto&, auto in) { return pow(in[0], 3); });
  expect_gradients("pow2", uniform({{5}}), [](auto&, auto in) { return pow(in[0], 2); });
}
TEST(GradCheck, Exp) {
  expect_gradients("exp", uniform({{5}}), [](auto&, auto in) { return exp(in[0]); });
}
TEST(GradCheck, Sine) {
  expect_gradients("sin", uniform({{5}}), [](auto&, auto in) { return sin(in[0]); });
}
TEST(GradCheck, Cosine) {
  expect_gradients("cos", uniform({{5}}), [](auto&, auto in) { return cos(in[0]); });
}
TEST(GradCheck, Abs) {
  expect_gradients("abs", nonzero({{6}}), [](auto&, auto in) { return abs(in[0]); });
}
TEST(GradCheck, Sign) {
  expect_gradients("sign", nonzero({{6}}), [](auto&, auto in) { return sign(in[0]) * in[0]; });
}
TEST(GradCheck, Clip) {
  // Keep points 0.05 away from the clip bounds at +-1.
  PointGen gen = [](std::mt19937_64& rng) {
    Tensor<double> x = random_tensor(Shape{8}, rng, -2, 2);
    for (auto& v : x.data())
      if (std::abs(std::abs(v) - 1.0) < 0.05) v *= 1.2;
    return std::vector<Tensor<double>>{x};
  };
  expect_gradients("clip", gen, [](auto&, auto in) { return clip(in[0], -1.0, 1.0); });
}
TEST(GradCheck, Relu) {
  expect_gradients("relu", nonzero({{6}}), [](auto&, auto in) { return relu(in[0]); });
}
TEST(GradCheck, Softmax) {
  expect_gradients("softmax", uniform({{3, 5}}), [](auto&, auto in) { return softmax(in[0]); });
}
TEST(GradCheck, CrossEntropy) {
  PointGen gen = [](std::mt19937_64& rng) {
    return std::vector<Tensor<double>>{random_tensor(Shape{3, 4}, rng, 0.1, 1.0)};
  };
  Tensor<double> y(Shape{3, 4});
  y.at(0, 1) = y.at(1, 3) = y.at(2, 0) = 1.0;
  expect_gradients("cross_entropy", gen, [y](auto&, auto in) { return categorical_cross_entropy(in[0], y); });
}
TEST(GradCheck, Dropout) {
  // Same tape seed per evaluation, so every probe sees the same mask.
  PointGen gen = uniform({{16}});
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto point = gen(rng);
    auto masked = [trial](Tape<double>& outer, std::span<const Var<double>> in) {
      Tape<double> mask_tape(true, static_cast<std::uint64_t>(trial));
      auto ones = mask_tape.leaf(Tensor<double>(in[0].shape(), 1.0));
      Tensor<double> mask = dropout(ones, 0.5).value();
      return in[0] * outer.constant(mask);
    };
    auto r = grad_check(masked, point);
    EXPECT_TRUE(r.pass);
  }
  // The primitive itself: its gradient equals the mask it applied.
  Tape<double> t(true, 77);
  auto x = t.leaf(Tensor<double>(Shape{32}, 2.0));
  auto y = dropout(x, 0.5);
  t.backward(sum(y));
  for (std::size_t i = 0; i < 32; ++i) EXPECT_DOUBLE_EQ(t.grad(x)[i], y.value()[i] / 2.0);
}
TEST(GradCheck, Reshape) {
  expect_gradients("reshape", uniform({{2, 6}}), [](auto&, auto in) { return reshape(in[0], Shape{3, 4}); });
}
TEST(GradCheck, Slice) {
  expect_gradients("slice", uniform({{2, 5, 3}}), [](auto&, auto in) { return slice(in[0], 1, 1, 4); });
}
TEST(GradCheck, Concatenate) {
  expect_gradients("concat", uniform({{2, 2, 3}, {2, 1, 3}}),
                   [](auto&, auto in) { return concat<double>({in[0], in[1]}, 1); });
}
TEST(GradCheck, ReduceSum) {
  expect_gradients("reduce_sum_axis", uniform({{2, 3, 4}}), [](auto&, auto in) { return sum(in[0], 1); });
  expect_gradients("reduce_sum_all", uniform({{2, 3}}), [](auto&, auto in) { return sum(in[0]); });
}
TEST(GradCheck, ReduceMean) {
  expect_gradients("reduce_mean_axis", uniform({{2, 3, 4}}), [](auto&, auto in) { return mean(in[0], 2); });
  expect_gradients("reduce_mean_all", uniform({{2, 3}}), [](auto&, auto in) { return mean(in[0]); });
}

// ---- invariants ----

TEST(Invariants, BackwardIsLinearInSeed) {
  std::mt19937_64 rng(21);
  auto xv = random_tensor(Shape{2, 3, 10}, rng);
  auto wv = random_tensor(Shape{4, 3, 3}, rng);
  auto seed = random_tensor(Shape{2, 4, 10}, rng);
  const double a = -2.75;
  Tensor<double> scaled = seed;
  for (auto& v : scaled.data()) v *= a;

  auto grads = [&](const Tensor<double>& s) {
    Tape<double> t;
    auto x = t.leaf(xv);
    auto w = t.leaf(wv);
    auto y = sin(conv1d(x, w, Padding::same)) * conv1d(x, w, Padding::same);
    t.backward(y, s);
    return std::pair{t.grad(x), t.grad(w)};
  };
  auto [gx1, gw1] = grads(seed);
  auto [gxa, gwa] = grads(scaled);
  for (std::size_t i = 0; i < gx1.size(); ++i) EXPECT_NEAR(gxa[i], a * gx1[i], 1e-10);
  for (std::size_t i = 0; i < gw1.size(); ++i) EXPECT_NEAR(gwa[i], a * gw1[i], 1e-10);
}

TEST(Invariants, RepeatedPassesAreBitIdentical) {
  std::mt19937_64 rng(22);
  auto xv = random_tensor(Shape{4, 16}, rng);
  auto wv = random_tensor(Shape{16, 8}, rng);
  auto run = [&] {
    Tape<double> t(true, 1234);
    auto x = t.leaf(xv);
    auto w = t.leaf(wv);
    auto y = sum(softmax(dropout(relu(matmul(x, w)), 0.5)) * 3.0);
    t.backward(y);
    return std::tuple{y.value(), t.grad(x), t.grad(w)};
  };
  EXPECT_EQ(run(), run());
}

// ---- error paths ----

TEST(Errors, ShapeMismatchNamesPrimitiveAndShapes) {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>(Shape{2, 3}));
  auto b = t.leaf(Tensor<double>(Shape{4}));
  try {
    (void)add(a, b);
    FAIL() << "expected shape error";
  } catch (const Error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
  EXPECT_THROW((void)matmul(a, a), Error);
  EXPECT_THROW((void)conv1d(a, a, Padding::valid), Error);
}

TEST(Errors, NonFiniteResultIsRejected) {
  Tape<double> t;
  auto a = t.leaf(Tensor<double>::scalar(1.0));
  auto z = t.leaf(Tensor<double>::scalar(0.0));
  EXPECT_THROW((void)(a / z), Error);
  auto big = t.leaf(Tensor<double>::scalar(1e6));
  EXPECT_THROW((void)exp(big), Error);
}

TEST(Errors, BackwardWithoutForward) {
  Tape<double> t;
  EXPECT_THROW(t.backward(Var<double>{&t, 0}), Error);
  Tape<double> other;
  auto x = other.leaf(Tensor<double>::scalar(1.0));
  EXPECT_THROW(t.backward(x), Error);
  EXPECT_THROW((void)t.grad(Var<double>{&t, 0}), Error);
}

TEST(Errors, SeedShapeMismatch) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{3}, 1.0));
  auto y = x * x;
  EXPECT_THROW(t.backward(y, Tensor<double>(Shape{4}, 1.0)), Error);
}

TEST(Errors, ValidConvolutionKernelTooLong) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(Shape{1, 1, 3}));
  auto w = t.leaf(Tensor<double>(Shape{1, 1, 4}));
  EXPECT_THROW((void)conv1d(x, w, Padding::valid), Error);
  EXPECT_NO_THROW((void)conv1d(x, w, Padding::same));
}
