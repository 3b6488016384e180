#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "mcfnet/checkpoint.hpp"
#include "mcfnet/ops.hpp"
#include "mcfnet/optimizer.hpp"

using namespace mcfnet;
namespace fs = std::filesystem;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Triple-loop reference product.
std::vector<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

}  // namespace

TEST(Tensor, InvariantsHold) {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dtype(), DType::float32);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  t.set_requires_grad(true);
  t.zero_grad();
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Matmul, IdentityLeavesInputUnchanged) {
  Graph<double> g;
  Tensor<double> eye(Shape{2, 2}, {1, 0, 0, 1});
  auto x = random_tensor({2, 3}, 1);
  auto y = ops::matmul(g, eye, x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Matmul, HandComputedProduct) {
  Graph<double> g;
  Tensor<double> a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor<double> b(Shape{2, 1}, {0, 1});
  auto c = ops::matmul(g, a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 2.0);
  EXPECT_EQ(c[1], 4.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Graph<double> g;
  auto a = random_tensor({5, 7}, 2);
  auto b = random_tensor({7, 3}, 3);
  auto c = ops::matmul(g, a, b);
  const auto ref = naive_matmul(a, b);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  Tensor<double> a(Shape{2, 3}), b(Shape{2, 3});
  try {
    ops::matmul(g, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2 x 3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformOnEqualLogits) {
  Graph<double> g;
  Tensor<double> x(Shape{3}, {0, 0, 0});
  auto y = ops::softmax(g, x, 0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SingleElementAxisIsOne) {
  Graph<double> g;
  Tensor<double> x(Shape{2, 1}, {-3.0, 42.0});
  auto y = ops::softmax(g, x, 1);
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 1.0);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Graph<float> g;
  Tensor<float> x(Shape{2}, {1000.f, 1000.f});
  auto y = ops::softmax(g, x, 0);
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(Softmax, RejectsNonFiniteInput) {
  Graph<double> g;
  Tensor<double> x(Shape{2}, {1.0, std::nan("")});
  EXPECT_THROW(ops::softmax(g, x, 0), NumericError);
  Tensor<double> y(Shape{2}, {1.0, INFINITY});
  EXPECT_THROW(ops::softmax(g, y, 0), NumericError);
}

TEST(Softmax, RowsAreDistributionsForLargeMagnitudes) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Graph<double> g;
    auto x = random_tensor({4, 6}, seed, -1e3, 1e3);
    for (std::size_t axis : {0u, 1u}) {
      auto y = ops::softmax(g, x, axis);
      const std::size_t outer = axis == 0 ? 6 : 4, len = axis == 0 ? 4 : 6;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0;
        for (std::size_t l = 0; l < len; ++l) {
          const double v = axis == 0 ? y[l * 6 + o] : y[o * 6 + l];
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  Graph<double> g;
  Tensor<double> x(Shape{4}, 2.5);
  Tensor<double> gain(Shape{4}, 1.0), bias(Shape{4}, 0.0);
  auto y = ops::layer_norm(g, x, gain, bias, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(LayerNorm, ClosedFormTwoElements) {
  Graph<double> g;
  Tensor<double> x(Shape{2}, {1.0, 3.0});
  Tensor<double> gain(Shape{2}, 1.0), bias(Shape{2}, 0.0);
  auto y = ops::layer_norm(g, x, gain, bias, 1e-14);
  EXPECT_NEAR(y[0], -1.0, 1e-12);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
}

TEST(LayerNorm, PreAffineOutputIsStandardized) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Graph<double> g;
    auto x = random_tensor({3, 16}, seed, -5, 5);
    Tensor<double> gain(Shape{16}, 1.0), bias(Shape{16}, 0.0);
    auto y = ops::layer_norm(g, x, gain, bias, 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < 16; ++j) mu += y[r * 16 + j];
      mu /= 16;
      for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mu) * (y[r * 16 + j] - mu);
      var /= 16;
      EXPECT_LT(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-5);
    }
  }
}

TEST(Conv1d, WindowOneIsPerPositionAffineRelu) {
  Graph<double> g;
  auto x = random_tensor({4, 3}, 7);
  auto w = random_tensor({3, 2}, 8);
  auto b = random_tensor({2}, 9);
  auto y = ops::conv1d_relu(g, x, w, b, 1);
  auto lin = ops::relu(g, ops::linear(g, x, w, b));
  ASSERT_EQ(y.shape(), lin.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], lin[i], 1e-14);
}

TEST(Conv1d, ZeroInputZeroBiasIsZero) {
  Graph<double> g;
  Tensor<double> x(Shape{5, 3}, 0.0);
  auto w = random_tensor({9, 4}, 1);
  Tensor<double> b(Shape{4}, 0.0);
  auto y = ops::conv1d_relu(g, x, w, b, 3);
  EXPECT_EQ(y.shape(), (Shape{3, 4}));
  for (const double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv1d, WindowTwoMatchesSlidingDotProducts) {
  Graph<double> g;
  auto x = random_tensor({3, 2}, 11);
  auto w = random_tensor({4, 3}, 12);
  auto b = random_tensor({3}, 13);
  auto y = ops::conv1d_relu(g, x, w, b, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = b[o];
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t c = 0; c < 2; ++c) acc += x[(t + j) * 2 + c] * w[(j * 2 + c) * 3 + o];
      EXPECT_NEAR(y[t * 3 + o], std::max(acc, 0.0), 1e-14);
    }
  }
}

TEST(Conv1d, ShortSequenceAsksForPadding) {
  Graph<double> g;
  Tensor<double> x(Shape{2, 3});
  Tensor<double> w(Shape{9, 3}), b(Shape{3});
  try {
    ops::conv1d_relu(g, x, w, b, 3);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(Reductions, MeanPoolOfIdenticalRowsIsThatRow) {
  Graph<double> g;
  Tensor<double> x(Shape{3, 2}, {1, 2, 1, 2, 1, 2});
  auto y = ops::mean_pool(g, x, 0);
  EXPECT_EQ(y.shape(), (Shape{2}));
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
}

TEST(Reductions, MaxPoolRoutesGradientToArgmax) {
  Graph<double> g;
  Tensor<double> x(Shape{3}, {1, 5, 3});
  x.set_requires_grad(true);
  auto y = ops::max_pool(g, x, 0);
  EXPECT_EQ(y.item(), 5.0);
  g.backward(y);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Reductions, MaxPoolTieGoesToFirstIndex) {
  Graph<double> g;
  Tensor<double> x(Shape{3}, {4, 4, 1});
  x.set_requires_grad(true);
  g.backward(ops::max_pool(g, x, 0));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Reductions, EmptyAxisIsRejected) {
  Graph<double> g;
  Tensor<double> x(Shape{0, 2});
  EXPECT_THROW(ops::mean_pool(g, x, 0), ShapeError);
  EXPECT_THROW(ops::max_pool(g, x, 0), ShapeError);
}

TEST(Reductions, ConcatShapeArithmetic) {
  Graph<double> g;
  auto a = random_tensor({2, 3}, 1);
  auto b = random_tensor({2, 3}, 2);
  auto c = ops::concat(g, {a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 6}));
  EXPECT_EQ(c[3], b[0]);
  EXPECT_EQ(c[6], a[3]);
}

TEST(Reductions, MeanPoolThenSubtractIsZeroMean) {
  Graph<double> g;
  auto x = random_tensor({2, 5, 3}, 4);
  auto m = ops::mean_pool(g, x, 1);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t l = 0; l < 5; ++l) s += x[(b * 5 + l) * 3 + j] - m[b * 3 + j];
      EXPECT_NEAR(s, 0.0, 1e-12);
    }
  }
}

TEST(Reductions, DropoutMaskRejectsBadProbability) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(ops::dropout_mask<double>({3}, 0.0, rng), ConfigError);
  EXPECT_THROW(ops::dropout_mask<double>({3}, 1.5, rng), ConfigError);
  auto all = ops::dropout_mask<double>({8}, 1.0, rng);
  for (const double v : all.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SumGivesOnes) {
  Graph<double> g;
  auto w = random_tensor({2, 3}, 5);
  w.set_requires_grad(true);
  g.backward(ops::sum(g, w));
  for (const double v : w.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, NonScalarLossRejected) {
  Graph<double> g;
  auto w = random_tensor({2}, 5);
  w.set_requires_grad(true);
  auto y = ops::scale(g, w, 2.0);
  EXPECT_THROW(g.backward(y), ShapeError);
}

TEST(Backward, DetachedTensorGetsNoGradient) {
  Graph<double> g;
  auto w = random_tensor({3}, 6);
  w.set_requires_grad(true);
  auto d = w.detach();
  auto loss = ops::sum(g, ops::mul(g, w, d));
  g.backward(loss);
  EXPECT_FALSE(d.requires_grad());
  EXPECT_FALSE(d.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(Backward, RepeatedCallsAccumulate) {
  Graph<double> g;
  auto w = random_tensor({3}, 6);
  w.set_requires_grad(true);
  auto loss = ops::sum(g, ops::scale(g, w, 3.0));
  g.backward(loss);
  g.backward(loss);
  for (const double v : w.grad()) EXPECT_EQ(v, 6.0);
}

TEST(Backward, UnreachableParameterHasNoGradient) {
  Graph<double> g;
  auto used = random_tensor({3}, 1);
  auto unused = random_tensor({3}, 2);
  used.set_requires_grad(true);
  unused.set_requires_grad(true);
  g.backward(ops::sum(g, used));
  EXPECT_FALSE(unused.has_grad());
}

TEST(Backward, NodesAreAppendOrdered) {
  Graph<double> g;
  auto w = random_tensor({2, 2}, 1);
  w.set_requires_grad(true);
  auto y = ops::relu(g, ops::matmul(g, w, w));
  auto loss = ops::sum(g, ops::softmax(g, y, 1));
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (const auto& in : g.node(i).inputs) {
      if (in) {
        EXPECT_LT(*in, i);
      }
    }
  }
  EXPECT_EQ(*loss.node_id(), g.size() - 1);
}

TEST(Backward, BitIdenticalAcrossRuns) {
  auto run = [] {
    Graph<float> g;
    Tensor<float> w(Shape{4, 4});
    std::mt19937_64 rng(3);
    std::normal_distribution<float> n(0.f, 1.f);
    for (auto& v : w.data()) v = n(rng);
    w.set_requires_grad(true);
    auto y = ops::softmax(g, ops::gelu(g, ops::matmul(g, w, w)), 1);
    g.backward(ops::sum(g, ops::mul(g, y, y)));
    return std::vector<float>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(NonRecordingGraph, RecordsNothing) {
  Graph<double> g(false);
  auto w = random_tensor({2, 2}, 1);
  w.set_requires_grad(true);
  auto y = ops::matmul(g, w, w);
  EXPECT_EQ(g.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  auto w = random_tensor({3}, 1);
  w.set_requires_grad(true);
  const auto before = std::vector<double>(w.data().begin(), w.data().end());
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.lr_other = 0.1;
  AdamW<double> opt({{"w", w, ParamGroup::other}}, cfg);
  opt.zero_grad();
  opt.step();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w[i], before[i]);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, ScalarQuadraticHandTrace) {
  // f(w) = w^2 at w = 1: g = 2, m = 0.2, v = 0.004, bias-corrected
  // m = 2, v = 4, so w <- 1 - 0.1 * 2 / (2 + 1e-8).
  Tensor<double> w(Shape{1}, {1.0});
  w.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.lr_other = 0.1;
  AdamW<double> opt({{"w", w, ParamGroup::other}}, cfg);
  opt.zero_grad();
  Graph<double> g;
  g.backward(ops::sum(g, ops::mul(g, w, w)));
  opt.step();
  EXPECT_LT(w[0], 1.0);
  EXPECT_NEAR(w[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
}

TEST(AdamW, DecoupledDecayContractsWithZeroGradient) {
  Tensor<double> w(Shape{2}, {0.7, -1.3});
  w.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.weight_decay = 5e-4;
  cfg.lr_other = 0.1;
  AdamW<double> opt({{"w", w, ParamGroup::other}}, cfg);
  for (int s = 0; s < 3; ++s) {
    const double a = std::abs(w[0]), b = std::abs(w[1]);
    opt.zero_grad();
    opt.step();
    EXPECT_LT(std::abs(w[0]), a);
    EXPECT_LT(std::abs(w[1]), b);
    EXPECT_NEAR(w[0] / w[1], 0.7 / -1.3, 1e-14);  // pure scaling toward zero
  }
  EXPECT_EQ(opt.step_count(), 3u);
}

TEST(AdamW, MissingGradientListsParameterName) {
  Tensor<double> w(Shape{1}, {1.0});
  w.set_requires_grad(true);
  AdamW<double> opt({{"encoder.w_q", w, ParamGroup::other}}, {});
  try {
    opt.step();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w_q"), std::string::npos);
  }
}

TEST(AdamW, GroupLearningRates) {
  AdamWConfig cfg;
  EXPECT_EQ(cfg.lr_for(ParamGroup::text_encoder), 1e-5);
  EXPECT_EQ(cfg.lr_for(ParamGroup::image_encoder), 1e-4);
  EXPECT_EQ(cfg.lr_for(ParamGroup::other), 1e-4);
  EXPECT_EQ(cfg.weight_decay, 5e-4);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = fs::temp_directory_path() / "mcfnet_ckpt_test";
  fs::remove_all(dir);
  std::mt19937_64 rng(9);
  ParamList<float> params{{"a", trunc_normal_param<float>({3, 4}, 0.02, rng), ParamGroup::other},
                          {"b", constant_param<float>({5}, 0.25f), ParamGroup::other}};
  params[1].tensor[2] = std::nextafter(0.25f, 1.0f);
  save_checkpoint(dir, params);
  ParamList<float> loaded{{"a", Tensor<float>({3, 4}), ParamGroup::other},
                          {"b", Tensor<float>({5}), ParamGroup::other}};
  load_checkpoint(dir, loaded);
  for (std::size_t q = 0; q < 2; ++q) {
    ASSERT_EQ(loaded[q].tensor.numel(), params[q].tensor.numel());
    EXPECT_EQ(std::memcmp(loaded[q].tensor.data().data(), params[q].tensor.data().data(),
                          params[q].tensor.numel() * sizeof(float)),
              0);
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, TruncatedWeightsRejected) {
  const fs::path dir = fs::temp_directory_path() / "mcfnet_ckpt_trunc";
  fs::remove_all(dir);
  ParamList<double> params{{"w", constant_param<double>({8}, 1.0), ParamGroup::other}};
  save_checkpoint(dir, params);
  fs::resize_file(dir / "weights.bin", 16);
  EXPECT_THROW(load_checkpoint(dir, params), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, DtypeMismatchRejected) {
  const fs::path dir = fs::temp_directory_path() / "mcfnet_ckpt_dtype";
  fs::remove_all(dir);
  ParamList<double> params{{"w", constant_param<double>({2}, 1.0), ParamGroup::other}};
  save_checkpoint(dir, params);
  ParamList<float> other{{"w", constant_param<float>({2}, 0.f), ParamGroup::other}};
  EXPECT_THROW(load_checkpoint(dir, other), IoError);
  fs::remove_all(dir);
}
