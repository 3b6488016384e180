#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mcfnet/fusion.hpp"
#include "mcfnet/gradcheck.hpp"

using namespace mcfnet;

namespace {

template <typename T = double>
Tensor<T> rnd(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
Tensor<T> probe_sum(Graph<T>& g, const Tensor<T>& y, std::uint64_t seed) {
  return ops::sum(g, ops::mul(g, y, rnd<T>(y.shape(), seed)));
}

template <typename T>
void spread(const ParamList<T>& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& p : params) {
    auto t = p.tensor;
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
  }
}

template <typename T>
void set_all(const Tensor<T>& t, T value) {
  auto h = t;
  for (auto& v : h.data()) v = value;
}

// Row-major LayerNorm reference on one vector (unit gain, zero bias).
std::vector<double> layer_norm_ref(const std::vector<double>& v, double eps = 1e-5) {
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= n;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mu) / std::sqrt(var + eps);
  return out;
}

// Objective minimized by the elastic-net channel for one coordinate.
double elastic_objective(double xp, double x, double alpha, double beta) {
  return (xp - x) * (xp - x) + alpha * std::abs(xp) + beta * xp * xp;
}

// Golden-section refinement after a coarse grid: the objective is convex.
double elastic_grid_minimizer(double x, double alpha, double beta) {
  double lo = -std::abs(x) - 1.0, hi = std::abs(x) + 1.0, best = 0.0, best_v = 1e300;
  const int n = 20000;
  for (int i = 0; i <= n; ++i) {
    const double xp = lo + (hi - lo) * i / n;
    const double v = elastic_objective(xp, x, alpha, beta);
    if (v < best_v) {
      best_v = v;
      best = xp;
    }
  }
  double a = best - (hi - lo) / n, b = best + (hi - lo) / n;
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double c = b - r * (b - a), d = a + r * (b - a);
    if (elastic_objective(c, x, alpha, beta) < elastic_objective(d, x, alpha, beta)) {
      b = d;
    } else {
      a = c;
    }
  }
  return 0.5 * (a + b);
}

EncoderOutput<double> fake_text(std::size_t B, std::size_t D, std::size_t d,
                                const std::vector<std::size_t>& lengths, std::uint64_t seed) {
  EncoderOutput<double> e;
  e.context = rnd({B, D, d}, seed);
  e.mask = Tensor<double>({B, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < lengths[b]; ++t) e.mask[b * D + t] = 1.0;
  Graph<double> g(false);
  e.global = ops::masked_mean(g, e.context, e.mask);
  return e;
}

EncoderOutput<double> fake_image(std::size_t B, std::size_t N, std::size_t d, std::uint64_t seed) {
  EncoderOutput<double> e;
  e.context = rnd({B, N + 1, d}, seed);
  e.mask = Tensor<double>({B, N + 1}, 1.0);
  Graph<double> g(false);
  e.global = ops::select(g, e.context, 1, 0);
  return e;
}

FusionConfig small_fusion(std::size_t d_f = 8) {
  FusionConfig c;
  c.d_f = d_f;
  c.heads = 2;
  c.ffn_width = 8;
  return c;
}

void expect_row_stochastic(const Tensor<double>& w) {
  const std::size_t cols = w.dim(w.rank() - 1), rows = w.numel() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      EXPECT_GE(w[r * cols + c], 0.0);
      s += w[r * cols + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace

// --- dropout channel ---------------------------------------------------------------

TEST(DropoutChannel, InferenceIsIdentity) {
  auto x = rnd({4, 5}, 1);
  std::mt19937_64 rng(1);
  Graph<double> g;
  for (double p : {0.1, 0.5, 0.9}) {
    auto y = dropout_channel(g, x, p, RunMode::inference, rng);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  }
}

TEST(DropoutChannel, KeepAllIsIdentityInBothModes) {
  auto x = rnd({3, 7}, 2);
  std::mt19937_64 rng(2);
  Graph<double> g;
  for (auto mode : {RunMode::training, RunMode::inference}) {
    auto y = dropout_channel(g, x, 1.0, mode, rng);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  }
}

TEST(DropoutChannel, MonteCarloMeanConvergesToInput) {
  const Tensor<double> x({4}, std::vector<double>{1.0, -2.0, 0.5, 3.0});
  std::mt19937_64 rng(12345);
  std::vector<double> acc(4, 0.0);
  const int draws = 100000;
  Graph<double> g(false);
  for (int k = 0; k < draws; ++k) {
    auto y = dropout_channel(g, x, 0.5, RunMode::training, rng);
    for (std::size_t i = 0; i < 4; ++i) acc[i] += y[i];
  }
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(acc[i] / draws, x[i], 0.01 * std::abs(x[i])) << "element " << i;
  }
}

TEST(DropoutChannel, TrainingValuesAreZeroOrScaled) {
  auto x = rnd({50}, 3);
  std::mt19937_64 rng(3);
  Graph<double> g(false);
  auto y = dropout_channel(g, x, 0.8, RunMode::training, rng);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_TRUE(y[i] == 0.0 || std::abs(y[i] - x[i] / 0.8) < 1e-15);
  }
}

TEST(DropoutChannel, RejectsNonPositiveKeep) {
  auto x = rnd({2}, 1);
  std::mt19937_64 rng(1);
  Graph<double> g;
  EXPECT_THROW(dropout_channel(g, x, 0.0, RunMode::training, rng), ConfigError);
  EXPECT_THROW(dropout_channel(g, x, -0.5, RunMode::inference, rng), ConfigError);
  EXPECT_THROW(dropout_channel(g, x, 1.5, RunMode::training, rng), ConfigError);
}

TEST(DropoutChannel, GradientUsesSameMask) {
  auto x = rnd({6}, 4);
  auto gx = finite_diff_check(
      [](Graph<double>& g, const Tensor<double>& in) {
        std::mt19937_64 rng(77);  // same mask on every evaluation
        return probe_sum(g, dropout_channel(g, in, 0.6, RunMode::training, rng), 5);
      },
      x);
  EXPECT_LT(gx.max_rel_error, 1e-6);
}

// --- elastic-net channel ---------------------------------------------------------------

TEST(ElasticNet, ZeroCoefficientsIsIdentity) {
  auto x = rnd({10}, 5, -3.0, 3.0);
  Graph<double> g;
  auto y = elastic_net_channel(g, x, 0.0, 0.0);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(ElasticNet, HandExamples) {
  Graph<double> g;
  EXPECT_DOUBLE_EQ(elastic_net_channel(g, Tensor<double>::scalar(2.0), 0.0, 1.0).item(), 1.0);
  EXPECT_DOUBLE_EQ(elastic_net_channel(g, Tensor<double>::scalar(1.0), 1.0, 0.0).item(), 0.5);
  EXPECT_DOUBLE_EQ(elastic_net_channel(g, Tensor<double>::scalar(0.3), 1.0, 0.0).item(), 0.0);
  EXPECT_DOUBLE_EQ(elastic_net_channel(g, Tensor<double>::scalar(-1.0), 1.0, 0.0).item(), -0.5);
}

TEST(ElasticNet, HandExamplesMatchGridOracle) {
  EXPECT_NEAR(elastic_grid_minimizer(2.0, 0.0, 1.0), 1.0, 1e-6);
  EXPECT_NEAR(elastic_grid_minimizer(1.0, 1.0, 0.0), 0.5, 1e-6);
  EXPECT_NEAR(elastic_grid_minimizer(0.3, 1.0, 0.0), 0.0, 1e-6);
}

TEST(ElasticNet, MatchesNumericMinimizer) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ux(-3.0, 3.0), uc(0.0, 2.0);
  Graph<double> g;
  for (int k = 0; k < 60; ++k) {
    const double x = ux(rng), a = uc(rng), b = uc(rng);
    const double y = elastic_net_channel(g, Tensor<double>::scalar(x), a, b).item();
    EXPECT_NEAR(y, elastic_grid_minimizer(x, a, b), 1e-6) << "x=" << x << " a=" << a << " b=" << b;
  }
}

TEST(ElasticNet, ShrinksAndPreservesSign) {
  auto x = rnd({500}, 10, -2.0, 2.0);
  Graph<double> g;
  auto y = elastic_net_channel(g, x, 0.7, 0.3);
  for (std::size_t i = 0; i < 500; ++i) {
    EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
    EXPECT_TRUE(y[i] == 0.0 || std::signbit(y[i]) == std::signbit(x[i]));
  }
}

TEST(ElasticNet, RejectsNegativeCoefficients) {
  Graph<double> g;
  auto x = rnd({3}, 1);
  EXPECT_THROW(elastic_net_channel(g, x, -0.1, 0.0), ConfigError);
  EXPECT_THROW(elastic_net_channel(g, x, 0.0, -1.0), ConfigError);
}

TEST(ElasticNet, GradientAwayFromKink) {
  Tensor<double> x({6}, std::vector<double>{-1.5, -0.6, -0.1, 0.05, 0.7, 2.0});
  auto r = finite_diff_check(
      [](Graph<double>& g, const Tensor<double>& in) {
        return probe_sum(g, elastic_net_channel(g, in, 0.4, 0.25), 3);
      },
      x);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(ElasticNet, ZeroSubgradientAtKink) {
  Tensor<double> x({2}, std::vector<double>{0.2, -0.2});
  x.set_requires_grad(true);
  Graph<double> g;
  g.backward(ops::sum(g, elastic_net_channel(g, x, 0.4, 0.0)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

// --- unimodal fusion -------------------------------------------------------------

TEST(UnimodalFusion, ZeroInputZeroBiasGivesZero) {
  std::mt19937_64 rng(1);
  UnimodalFusion<double> f(4, 6, rng);
  Graph<double> g(false);
  auto y = f.forward(g, Tensor<double>({2, 4}), Tensor<double>({2, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(y.shape(), (Shape{2, 6}));
}

TEST(UnimodalFusion, BlockMatrixOracle) {
  std::mt19937_64 rng(2);
  const std::size_t d = 3, df = 5, B = 4;
  UnimodalFusion<double> f(d, df, rng);
  spread(ParamList<double>{{"w", f.weight()}, {"b", f.bias()}}, 8);
  auto a = rnd({B, d}, 3), c = rnd({B, d}, 4);
  Graph<double> g(false);
  auto y = f.forward(g, a, c);
  const auto& W = f.weight();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < df; ++j) {
      double s = f.bias()[j];
      for (std::size_t k = 0; k < d; ++k) s += a[b * d + k] * W[k * df + j];        // W top block
      for (std::size_t k = 0; k < d; ++k) s += c[b * d + k] * W[(d + k) * df + j];  // W bottom block
      EXPECT_NEAR(y[b * df + j], std::max(s, 0.0), 1e-12);
    }
  }
}

TEST(UnimodalFusion, Gradient) {
  std::mt19937_64 rng(3);
  UnimodalFusion<double> f(3, 4, rng);
  spread(ParamList<double>{{"w", f.weight()}, {"b", f.bias()}}, 9);
  auto a = rnd({2, 3}, 5), c = rnd({2, 3}, 6);
  auto r = finite_diff_check(
      [&](Graph<double>& g) { return probe_sum(g, f.forward(g, a, c), 11); },
      {a, c, f.weight(), f.bias()});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(UnimodalFusion, WidthMismatchThrows) {
  std::mt19937_64 rng(1);
  UnimodalFusion<double> f(4, 6, rng);
  Graph<double> g;
  EXPECT_THROW(f.forward(g, Tensor<double>({2, 4}), Tensor<double>({2, 3})), ShapeError);
  EXPECT_THROW(f.forward(g, Tensor<double>({2, 5}), Tensor<double>({2, 5})), ShapeError);
}

// --- image region pool ------------------------------------------------------------

TEST(ImageRegionPool, SingleRegionIsNormalizedUpdate) {
  std::mt19937_64 rng(1);
  ImageRegionPool<double> pool(6, 2, 8, rng);
  auto x = rnd({2, 1, 6}, 3);
  Graph<double> g(false);
  auto r = pool.forward(g, x);
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> v(r.regions.data().begin() + b * 6, r.regions.data().begin() + b * 6 + 6);
    auto ref = layer_norm_ref(v);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(r.pooled[b * 6 + k], ref[k], 1e-12);
  }
}

TEST(ImageRegionPool, BypassedAttentionGivesNormalizedMean) {
  std::mt19937_64 rng(1);
  ImageRegionPool<double> pool(5, 1, 8, rng);
  pool.set_bypass_attention(true);
  auto x = rnd({3, 4, 5}, 7);
  Graph<double> g(false);
  auto r = pool.forward(g, x);
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> mean(5, 0.0);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 5; ++k) mean[k] += x[(b * 4 + n) * 5 + k] / 4.0;
    auto ref = layer_norm_ref(mean);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(r.pooled[b * 5 + k], ref[k], 1e-12);
  }
}

TEST(ImageRegionPool, InvariantToRegionOrder) {
  std::mt19937_64 rng(4);
  ImageRegionPool<double> pool(8, 2, 16, rng);
  ParamList<double> p;
  pool.collect(p, "pool");
  spread(p, 4);
  const std::size_t N = 5, d = 8;
  auto x = rnd({1, N, d}, 12);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor<double> xp({1, N, d});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < d; ++k) xp[perm[n] * d + k] = x[n * d + k];
  Graph<double> g(false);
  auto a = pool.forward(g, x), b = pool.forward(g, xp);
  for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(a.pooled[k], b.pooled[k], 1e-5);
  expect_row_stochastic(a.weights);
}

TEST(ImageRegionPool, EmptySequenceThrows) {
  std::mt19937_64 rng(1);
  ImageRegionPool<double> pool(4, 1, 4, rng);
  Graph<double> g;
  EXPECT_THROW(pool.forward(g, Tensor<double>({2, 0, 4})), ShapeError);
}

// --- text conv pool -----------------------------------------------------------------

TEST(TextConvPool, ZeroWeightsGiveZero) {
  std::mt19937_64 rng(1);
  TextConvPool<double> pool(4, rng);
  ParamList<double> p;
  pool.collect(p, "c");
  for (const auto& np : p) {
    if (np.name.find("ln.gain") == std::string::npos) set_all(np.tensor, 0.0);
  }
  Graph<double> g(false);
  auto y = pool.forward(g, rnd({2, 5, 4}, 2));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TextConvPool, ConstantSequenceHandTrace) {
  std::mt19937_64 rng(2);
  const std::size_t d = 4, D = 6;
  TextConvPool<double> pool(d, rng);
  ParamList<double> p;
  pool.collect(p, "c");
  spread(p, 21);
  set_all(pool.norm_gain(), 1.0);
  set_all(pool.norm_bias(), 0.0);
  auto v = rnd({d}, 5);
  Tensor<double> seq({1, D, d});
  for (std::size_t t = 0; t < D; ++t)
    for (std::size_t k = 0; k < d; ++k) seq[t * d + k] = v[k];
  // Every window sees w copies of v, so every position gives the same response.
  std::vector<double> cat;
  for (std::size_t w = 1; w <= 3; ++w) {
    const auto& W = pool.conv_weight(w);
    const auto& b = pool.conv_bias(w);
    for (std::size_t j = 0; j < d; ++j) {
      double s = b[j];
      for (std::size_t r = 0; r < w; ++r)
        for (std::size_t k = 0; k < d; ++k) s += v[k] * W[(r * d + k) * d + j];
      cat.push_back(std::max(s, 0.0));
    }
  }
  std::vector<double> h(d);
  for (std::size_t j = 0; j < d; ++j) {
    h[j] = pool.proj_bias()[j];
    for (std::size_t k = 0; k < 3 * d; ++k) h[j] += cat[k] * pool.proj_weight()[k * d + j];
  }
  auto ref = layer_norm_ref(h);
  Graph<double> g(false);
  auto y = pool.forward(g, seq);
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(y[j], ref[j], 1e-10);
}

TEST(TextConvPool, MaxPoolMatchesSlidingWindowScan) {
  std::mt19937_64 rng(3);
  const std::size_t d = 3, D = 7, B = 2;
  TextConvPool<double> pool(d, rng);
  ParamList<double> p;
  pool.collect(p, "c");
  spread(p, 31);
  set_all(pool.norm_gain(), 1.0);
  set_all(pool.norm_bias(), 0.0);
  auto seq = rnd({B, D, d}, 8);
  Graph<double> g(false);
  auto y = pool.forward(g, seq);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> cat;
    for (std::size_t w = 1; w <= 3; ++w) {
      std::vector<double> best(d, -1e300);
      for (std::size_t t = 0; t + w <= D; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          double s = pool.conv_bias(w)[j];
          for (std::size_t r = 0; r < w; ++r)
            for (std::size_t k = 0; k < d; ++k)
              s += seq[(b * D + t + r) * d + k] * pool.conv_weight(w)[(r * d + k) * d + j];
          best[j] = std::max(best[j], std::max(s, 0.0));
        }
      }
      cat.insert(cat.end(), best.begin(), best.end());
    }
    std::vector<double> h(d);
    for (std::size_t j = 0; j < d; ++j) {
      h[j] = pool.proj_bias()[j];
      for (std::size_t k = 0; k < 3 * d; ++k) h[j] += cat[k] * pool.proj_weight()[k * d + j];
    }
    auto ref = layer_norm_ref(h);
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(y[b * d + j], ref[j], 1e-10);
  }
}

TEST(TextConvPool, ShortSequenceAsksForPadding) {
  std::mt19937_64 rng(1);
  TextConvPool<double> pool(4, rng);
  Graph<double> g;
  try {
    pool.forward(g, Tensor<double>({1, 2, 4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

// --- cross attention --------------------------------------------------------------

TEST(CrossModalAttention, PooledModeIsValueProjection) {
  std::mt19937_64 rng(5);
  const std::size_t d = 6, df = 4, B = 3;
  CrossModalAttention<double> cross(d, df, 2, CrossAttentionMode::pooled, rng);
  ParamList<double> p;
  cross.collect(p, "x");
  spread(p, 5);
  auto t0 = rnd({B, d}, 1), i0 = rnd({B, d}, 2);
  auto tseq = rnd({B, 4, d}, 3), iseq = rnd({B, 5, d}, 4);
  Tensor<double> tmask({B, 4}, 1.0);
  Graph<double> g(false);
  auto r = cross.forward(g, t0, i0, tseq, tmask, iseq);
  auto vi = ops::linear(g, i0, cross.image_attention().value_weight(),
                        cross.image_attention().value_bias());
  auto vt = ops::linear(g, t0, cross.text_attention().value_weight(),
                        cross.text_attention().value_bias());
  for (std::size_t i = 0; i < B * df; ++i) {
    EXPECT_EQ(r.image_prime[i], vi[i]);
    EXPECT_EQ(r.text_prime[i], vt[i]);
    EXPECT_EQ(r.fused[i], vi[i] + vt[i]);
  }
  for (double w : r.image_weights.data()) EXPECT_EQ(w, 1.0);
}

TEST(CrossModalAttention, SequenceModeRowsSumToOneAndRespectPads) {
  std::mt19937_64 rng(6);
  const std::size_t d = 6, B = 2, D = 5, N = 4;
  CrossModalAttention<double> cross(d, 6, 2, CrossAttentionMode::sequence, rng);
  ParamList<double> p;
  cross.collect(p, "x");
  spread(p, 6);
  auto text = fake_text(B, D, d, {5, 2}, 9);
  auto t0 = rnd({B, d}, 1), i0 = rnd({B, d}, 2), iseq = rnd({B, N, d}, 4);
  Graph<double> g(false);
  auto r = cross.forward(g, t0, i0, text.context, text.mask, iseq);
  EXPECT_EQ(r.image_weights.shape(), (Shape{B * 2, 1, N}));
  EXPECT_EQ(r.text_weights.shape(), (Shape{B * 2, 1, D}));
  expect_row_stochastic(r.image_weights);
  expect_row_stochastic(r.text_weights);
  // Second sample has 2 real tokens: heads 2 and 3 belong to it.
  for (std::size_t h = 2; h < 4; ++h)
    for (std::size_t t = 2; t < D; ++t) EXPECT_EQ(r.text_weights[h * D + t], 0.0);
  EXPECT_EQ(r.fused.shape(), (Shape{B, 6}));
}

TEST(CrossModalAttention, LogitsScaleQuadraticallyWithJointInputScale) {
  const std::size_t G = 2, Lq = 1, Lk = 3, dk = 4;
  auto q = rnd({G, Lq, dk}, 1), k = rnd({G, Lk, dk}, 2);
  const double c = 2.5, scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Graph<double> g(false);
  auto base = attention_logits(g, q, k, scale);
  auto scaled = attention_logits(g, ops::scale(g, q, c), ops::scale(g, k, c), scale);
  for (std::size_t gi = 0; gi < G; ++gi)
    for (std::size_t j = 0; j < Lk; ++j) {
      double direct = 0.0;
      for (std::size_t m = 0; m < dk; ++m) direct += c * q[gi * dk + m] * c * k[(gi * Lk + j) * dk + m];
      direct /= std::sqrt(static_cast<double>(dk));
      EXPECT_NEAR(scaled[gi * Lk + j], direct, 1e-12);
      EXPECT_NEAR(scaled[gi * Lk + j], c * c * base[gi * Lk + j], 1e-12);
    }
}

TEST(CrossModalAttention, HeadsMustDivideWidth) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(CrossModalAttention<double>(6, 5, 2, CrossAttentionMode::sequence, rng),
               ConfigError);
}

TEST(CrossModalAttention, PooledWidthMismatchThrows) {
  std::mt19937_64 rng(1);
  CrossModalAttention<double> cross(4, 4, 2, CrossAttentionMode::pooled, rng);
  Graph<double> g;
  Tensor<double> m({1, 3}, 1.0);
  EXPECT_THROW(cross.forward(g, rnd({1, 4}, 1), rnd({1, 6}, 2), rnd({1, 3, 4}, 3), m,
                             rnd({1, 2, 4}, 4)),
               ShapeError);
}

// --- topologies -------------------------------------------------------------------

class TopologyTest : public ::testing::TestWithParam<Topology> {};

TEST_P(TopologyTest, ShapeRowSumsAndParameterCount) {
  const std::size_t d = 8, df = 6, B = 2, D = 4, N = 4, f = 8;
  auto cfg = small_fusion(df);
  cfg.topology = GetParam();
  std::mt19937_64 rng(3);
  FusionModule<double> fusion(d, cfg, rng);
  auto text = fake_text(B, D, d, {4, 3}, 1);
  auto image = fake_image(B, N, d, 2);
  Graph<double> g(false);
  std::mt19937_64 drop(1);
  auto out = fusion.forward(g, text, image, RunMode::inference, drop);
  EXPECT_EQ(out.o_hybrid.shape(), (Shape{B, df}));
  EXPECT_EQ(out.o_text.shape(), (Shape{B, df}));
  EXPECT_EQ(out.o_image.shape(), (Shape{B, df}));
  ASSERT_FALSE(out.attention_weights.empty());
  for (const auto& w : out.attention_weights) expect_row_stochastic(w);

  // Closed-form parameter counts from the building blocks.
  using TB = TransformerBlock<double>;
  using MHA = MultiHeadAttention<double>;
  std::size_t expected = 0;
  switch (GetParam()) {
    case Topology::hybrid:
      expected = TB::count_for(d, f) + 2 * d                    // region block + LayerNorm
                 + (1 + 2 + 3) * d * d + 3 * d + (3 * d + 1) * d + 2 * d  // conv pool
                 + 2 * MHA::count_for(d, d, df, false);         // two cross directions
      break;
    case Topology::merged:
      expected = 2 * TB::count_for(d, f) + (d + 1) * df;
      break;
    case Topology::interaction:
      expected = 2 * MHA::count_for(d, d, d, true) + 2 * TB::count_for(d, f) + (d + 1) * df;
      break;
  }
  EXPECT_EQ(fusion.interaction_parameter_count(), expected);
}

INSTANTIATE_TEST_SUITE_P(AllTopologies, TopologyTest,
                         ::testing::Values(Topology::hybrid, Topology::merged,
                                           Topology::interaction),
                         [](const auto& info) { return to_string(info.param); });

TEST(Topology, StringRoundTrip) {
  for (auto t : {Topology::hybrid, Topology::merged, Topology::interaction})
    EXPECT_EQ(topology_from_string(to_string(t)), t);
  EXPECT_THROW(topology_from_string("nope"), ConfigError);
  EXPECT_EQ(cross_attention_mode_from_string("pooled"), CrossAttentionMode::pooled);
  EXPECT_THROW(cross_attention_mode_from_string("x"), ConfigError);
}

// --- full fusion module ---------------------------------------------------------

TEST(FusionModule, OutputWidthsAgreeAcrossConfigs) {
  const std::size_t d = 8;
  for (bool ham : {true, false})
    for (bool rm : {true, false})
      for (auto mode : {CrossAttentionMode::sequence, CrossAttentionMode::pooled}) {
        auto cfg = small_fusion(10);
        cfg.use_ham = ham;
        cfg.use_rm = rm;
        cfg.mode = mode;
        std::mt19937_64 rng(1);
        FusionModule<double> fusion(d, cfg, rng);
        Graph<double> g;
        std::mt19937_64 drop(2);
        auto out = fusion.forward(g, fake_text(3, 4, d, {4, 4, 1}, 1), fake_image(3, 4, d, 2),
                                  RunMode::training, drop);
        EXPECT_EQ(out.o_text.shape(), out.o_hybrid.shape());
        EXPECT_EQ(out.o_image.shape(), out.o_hybrid.shape());
        EXPECT_EQ(out.o_hybrid.shape(), (Shape{3, 10}));
      }
}

TEST(FusionModule, RegularizationOffPassesGlobalsThrough) {
  const std::size_t d = 4;
  auto cfg = small_fusion(4);
  cfg.use_rm = false;
  std::mt19937_64 rng(1);
  FusionModule<double> fusion(d, cfg, rng);
  ParamList<double> p;
  fusion.collect(p);
  spread(p, 3);
  auto text = fake_text(2, 3, d, {3, 3}, 1);
  auto image = fake_image(2, 4, d, 2);
  Graph<double> g(false);
  std::mt19937_64 drop(2);
  auto out = fusion.forward(g, text, image, RunMode::training, drop);
  // O_T = ReLU(W [Tg, Tg] + b)
  const auto& W = p[0].tensor;
  const auto& b = p[1].tensor;
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t j = 0; j < 4; ++j) {
      double v = b[j];
      for (std::size_t k = 0; k < d; ++k)
        v += text.global[s * d + k] * (W[k * 4 + j] + W[(d + k) * 4 + j]);
      EXPECT_NEAR(out.o_text[s * 4 + j], std::max(v, 0.0), 1e-12);
    }
}

TEST(FusionModule, NoHamUsesGlobalsOnly) {
  const std::size_t d = 4;
  auto cfg = small_fusion(4);
  cfg.use_ham = false;
  std::mt19937_64 rng(1);
  FusionModule<double> fusion(d, cfg, rng);
  auto text = fake_text(2, 3, d, {3, 2}, 1);
  auto image = fake_image(2, 4, d, 2);
  auto text2 = text;
  text2.context = rnd({2, 3, d}, 99);  // different context, same global
  Graph<double> g(false);
  std::mt19937_64 drop(2);
  auto a = fusion.forward(g, text, image, RunMode::inference, drop);
  auto b = fusion.forward(g, text2, image, RunMode::inference, drop);
  for (std::size_t i = 0; i < a.o_hybrid.numel(); ++i) EXPECT_EQ(a.o_hybrid[i], b.o_hybrid[i]);
  EXPECT_TRUE(a.attention_weights.empty());
}

TEST(FusionModule, InvalidConfigListsAllErrors) {
  auto cfg = small_fusion(7);
  cfg.reg.p = 0.0;
  cfg.reg.alpha = -1.0;
  auto errs = cfg.validate("fusion.", 8);
  EXPECT_EQ(errs.size(), 3u);
  std::mt19937_64 rng(1);
  EXPECT_THROW(FusionModule<double>(8, cfg, rng), ConfigError);
}

class FusionGradient : public ::testing::TestWithParam<std::tuple<Topology, CrossAttentionMode>> {
};

TEST_P(FusionGradient, EndToEndFiniteDifference) {
  const std::size_t d = 4, B = 2;
  auto cfg = small_fusion(4);
  cfg.topology = std::get<0>(GetParam());
  cfg.mode = std::get<1>(GetParam());
  cfg.reg = {0.7, 0.1, 0.2};
  std::mt19937_64 rng(5);
  FusionModule<double> fusion(d, cfg, rng);
  ParamList<double> p;
  fusion.collect(p);
  spread(p, 17);
  auto text = fake_text(B, 4, d, {4, 3}, 1);
  auto image = fake_image(B, 3, d, 2);
  std::vector<Tensor<double>> inputs{text.context, text.global, image.context, image.global};
  for (const auto& np : p) inputs.push_back(np.tensor);
  auto r = finite_diff_check(
      [&](Graph<double>& g) {
        std::mt19937_64 drop(3);
        auto f = fusion.forward(g, text, image, RunMode::training, drop);
        return ops::add(g, ops::add(g, probe_sum(g, f.o_text, 1), probe_sum(g, f.o_image, 2)),
                        probe_sum(g, f.o_hybrid, 3));
      },
      inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << "input " << r.worst_input << "[" << r.worst_index
                                   << "] analytic " << r.analytic << " numeric " << r.numeric;
}

INSTANTIATE_TEST_SUITE_P(
    Topologies, FusionGradient,
    ::testing::Values(std::make_tuple(Topology::hybrid, CrossAttentionMode::sequence),
                      std::make_tuple(Topology::hybrid, CrossAttentionMode::pooled),
                      std::make_tuple(Topology::merged, CrossAttentionMode::sequence),
                      std::make_tuple(Topology::interaction, CrossAttentionMode::sequence)));
