#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mcfnet/encoders.hpp"
#include "mcfnet/gradcheck.hpp"

using namespace mcfnet;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_width = 32;
  c.embedding_dim = 8;
  c.max_len = 12;
  return c;
}

ImageBatch random_images(std::size_t batch, std::size_t side, std::size_t channels,
                         std::size_t patch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageBatch b{batch, side, side, channels, patch, {}};
  b.pixels.resize(batch * side * side * channels);
  for (auto& p : b.pixels) p = u(rng);
  return b;
}

// Re-draws every parameter from U(-0.5, 0.5) so gradients are far from the
// roundoff floor of the checker.
template <typename T>
void spread_parameters(const ParamList<T>& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& p : params) {
    auto t = p.tensor;
    for (auto& v : t.data()) v = static_cast<T>(u(rng));
  }
}

template <typename T>
Tensor<T> probe_sum(Graph<T>& g, const Tensor<T>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<T> w(y.shape());
  for (auto& v : w.data()) v = static_cast<T>(u(rng));
  return ops::sum(g, ops::mul(g, y, w));
}

}  // namespace

// --- vocabulary and tokenize -------------------------------------------------

TEST(Tokenize, KnownWord) {
  Vocabulary v;
  for (int i = 0; i < 3; ++i) v.add("w" + std::to_string(i));
  EXPECT_EQ(v.add("bakery"), 5u);
  EXPECT_EQ(tokenize("bakery", v), (std::vector<std::size_t>{5}));
}

TEST(Tokenize, UnknownWordMapsToUnk) {
  Vocabulary v;
  v.add("bakery");
  EXPECT_EQ(tokenize("bakery museum", v), (std::vector<std::size_t>{2, Vocabulary::kUnk}));
}

TEST(Tokenize, EmptyTextIsSingleUnk) {
  Vocabulary v;
  EXPECT_EQ(tokenize("", v), (std::vector<std::size_t>{Vocabulary::kUnk}));
  EXPECT_EQ(tokenize("   ", v), (std::vector<std::size_t>{Vocabulary::kUnk}));
}

TEST(Tokenize, SplitsOnAnyWhitespace) {
  Vocabulary v;
  v.add("a");
  v.add("b");
  EXPECT_EQ(tokenize("a\tb\n a", v), (std::vector<std::size_t>{2, 3, 2}));
}

TEST(Vocabulary, ReservedIds) {
  Vocabulary v;
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.id("[PAD]"), 0u);
  EXPECT_EQ(v.id("[UNK]"), 1u);
  EXPECT_EQ(v.id("nope"), Vocabulary::kUnk);
}

TEST(Vocabulary, JsonRoundTrip) {
  Vocabulary v;
  v.add("red");
  v.add("circle");
  auto path = std::filesystem::temp_directory_path() / "mcfnet_vocab_test.json";
  v.save(path);
  EXPECT_EQ(Vocabulary::load(path), v);
  std::filesystem::remove(path);
}

TEST(Vocabulary, RejectsMissingReservedIds) {
  EXPECT_THROW(Vocabulary::from_json(R"({"a":0,"b":1})"), IoError);
  EXPECT_THROW(Vocabulary::from_json(R"({"[PAD]":0,"[UNK]":1,"x":5})"), IoError);
  EXPECT_THROW(Vocabulary::from_json("not json"), IoError);
}

// --- batches -------------------------------------------------------------------

TEST(TextBatch, PadsToLongestAndMinLength) {
  auto b = make_text_batch({{2, 3}, {4, 5, 6, 7}}, 10, 3);
  EXPECT_EQ(b.length, 4u);
  EXPECT_EQ(b.token_ids, (std::vector<std::size_t>{2, 3, 0, 0, 4, 5, 6, 7}));
  EXPECT_EQ(b.pad_mask, (std::vector<unsigned char>{1, 1, 0, 0, 1, 1, 1, 1}));
  auto c = make_text_batch({{2}}, 10, 3);
  EXPECT_EQ(c.length, 3u);
  EXPECT_NO_THROW(b.validate());
}

TEST(TextBatch, ValidateRejectsOutOfRangeIds) {
  auto b = make_text_batch({{2, 9}}, 5);
  EXPECT_THROW(b.validate(), ShapeError);
}

TEST(TextBatch, ValidateRejectsInconsistentMask) {
  auto b = make_text_batch({{2, 3}}, 5);
  b.pad_mask[2] = 1;
  EXPECT_THROW(b.validate(), ShapeError);
}

TEST(ImageBatch, RejectsNonDivisiblePatch) {
  auto b = random_images(1, 6, 1, 4, 1);
  EXPECT_THROW(b.validate(), ShapeError);
}

TEST(ImageBatch, RejectsOutOfRangePixels) {
  auto b = random_images(1, 4, 1, 2, 1);
  b.pixels[3] = 1.5f;
  try {
    b.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("preprocess"), std::string::npos);
  }
  b.pixels[3] = std::nanf("");
  EXPECT_THROW(b.validate(), ConfigError);
}

// --- patchify --------------------------------------------------------------------

TEST(Patchify, WholeImageIsOnePatch) {
  auto b = random_images(1, 4, 3, 4, 7);
  auto p = patchify<float>(b.pixels, 4, 4, 3, 4);
  ASSERT_EQ(p.shape(), (Shape{1, 48}));
  for (std::size_t i = 0; i < 48; ++i) EXPECT_EQ(p[i], b.pixels[i]);
}

TEST(Patchify, MatchesIndexOracle) {
  // 4x4x1 image holding 0..15 / 16, P = 2.
  std::vector<float> img(16);
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<float>(i) / 16.0f;
  auto p = patchify<float>(img, 4, 4, 1, 2);
  ASSERT_EQ(p.shape(), (Shape{4, 4}));
  for (std::size_t pr = 0; pr < 2; ++pr)
    for (std::size_t pc = 0; pc < 2; ++pc)
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 2; ++c) {
          const std::size_t patch = pr * 2 + pc, k = r * 2 + c;
          EXPECT_EQ(p[patch * 4 + k], img[(pr * 2 + r) * 4 + pc * 2 + c]);
        }
  // Spelled-out first patch: pixels 0, 1, 4, 5.
  EXPECT_EQ(p[0] * 16, 0.0f);
  EXPECT_EQ(p[1] * 16, 1.0f);
  EXPECT_EQ(p[2] * 16, 4.0f);
  EXPECT_EQ(p[3] * 16, 5.0f);
}

TEST(Patchify, ChannelOrderIsInnermost) {
  // 2x2x2 image, P = 2: the single patch is the raw (row, col, channel) buffer.
  std::vector<float> img{0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f};
  auto p = patchify<float>(img, 2, 2, 2, 2);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(p[i], img[i]);
}

TEST(Patchify, RoundTripIsExact) {
  for (std::size_t patch : {1u, 2u, 4u, 8u}) {
    auto b = random_images(1, 8, 3, patch, 11 + patch);
    auto p = patchify<float>(b.pixels, 8, 8, 3, patch);
    EXPECT_EQ(p.dim(0), 64 / (patch * patch));
    EXPECT_EQ(unpatchify(p, 8, 8, 3, patch), b.pixels);
  }
}

TEST(Patchify, NonSquareRoundTrip) {
  std::vector<float> img(6 * 4 * 2);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i) / 64.0f;
  auto p = patchify<float>(img, 6, 4, 2, 2);
  EXPECT_EQ(p.shape(), (Shape{6, 8}));
  EXPECT_EQ(unpatchify(p, 6, 4, 2, 2), img);
}

TEST(Patchify, NonDivisibleThrows) {
  std::vector<float> img(25, 0.0f);
  EXPECT_THROW(patchify<float>(img, 5, 5, 1, 2), ShapeError);
}

// --- configs -------------------------------------------------------------------------

TEST(EncoderConfig, ReportsEveryProblem) {
  EncoderConfig c;
  c.d_model = 10;
  c.n_heads = 3;
  c.ffn_width = 0;
  auto errs = c.validate("text: ");
  EXPECT_EQ(errs.size(), 2u);
  EXPECT_NE(errs[0].find("text: "), std::string::npos);
  std::mt19937_64 rng(1);
  EXPECT_THROW(TextEncoder<float>(c, 10, rng), ConfigError);
}

// --- text encoder ------------------------------------------------------------------

TEST(TextEncoder, OutputShapes) {
  std::mt19937_64 rng(1);
  TextEncoder<float> enc(small_config(), 20, rng);
  auto batch = make_text_batch({{2, 3, 4}, {5, 6}}, 20);
  Graph<float> g(false);
  auto out = enc.forward(g, batch);
  EXPECT_EQ(out.context.shape(), (Shape{2, 3, 16}));
  EXPECT_EQ(out.global.shape(), (Shape{2, 16}));
  EXPECT_EQ(out.mask.shape(), (Shape{2, 3}));
}

TEST(TextEncoder, DeterministicInInference) {
  std::mt19937_64 rng(3);
  TextEncoder<float> enc(small_config(), 20, rng);
  auto batch = make_text_batch({{2, 3, 4, 9}, {5, 6}}, 20);
  Graph<float> g1(false), g2(false);
  auto a = enc.forward(g1, batch), b = enc.forward(g2, batch);
  for (std::size_t i = 0; i < a.context.numel(); ++i) EXPECT_EQ(a.context[i], b.context[i]);
  for (std::size_t i = 0; i < a.global.numel(); ++i) EXPECT_EQ(a.global[i], b.global[i]);
}

TEST(TextEncoder, SameSeedSameWeights) {
  std::mt19937_64 r1(5), r2(5);
  TextEncoder<float> e1(small_config(), 20, r1), e2(small_config(), 20, r2);
  ParamList<float> p1, p2;
  e1.collect(p1);
  e2.collect(p2);
  ASSERT_EQ(p1.size(), p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_EQ(p1[i].name, p2[i].name);
    for (std::size_t k = 0; k < p1[i].tensor.numel(); ++k)
      EXPECT_EQ(p1[i].tensor[k], p2[i].tensor[k]);
  }
}

TEST(TextEncoder, GlobalInvariantToPadExtension) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 rng(seed);
    TextEncoder<float> enc(small_config(), 30, rng);
    auto shortb = make_text_batch({{2, 7, 9}, {4, 5}}, 30, 3);
    auto longb = make_text_batch({{2, 7, 9}, {4, 5}}, 30, 10);
    Graph<float> g(false);
    auto a = enc.forward(g, shortb), b = enc.forward(g, longb);
    ASSERT_EQ(b.context.dim(1), 10u);
    for (std::size_t i = 0; i < a.global.numel(); ++i)
      EXPECT_NEAR(a.global[i], b.global[i], 1e-5) << "seed " << seed << " index " << i;
  }
}

TEST(TextEncoder, GlobalIsMaskedMeanOfContext) {
  std::mt19937_64 rng(8);
  TextEncoder<double> enc(small_config(), 20, rng);
  auto batch = make_text_batch({{2, 3, 4, 5}, {6}}, 20);
  Graph<double> g(false);
  auto out = enc.forward(g, batch);
  const std::size_t L = 4, d = 16;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0.0, n = 0.0;
      for (std::size_t t = 0; t < L; ++t) {
        if (!batch.pad_mask[b * L + t]) continue;
        s += out.context[(b * L + t) * d + k];
        n += 1.0;
      }
      EXPECT_NEAR(out.global[b * d + k], s / n, 1e-12);
    }
  }
}

TEST(TextEncoder, SharingMakesStackSizeIndependentOfDepth) {
  auto c2 = small_config(), c6 = small_config();
  c2.n_layers = 2;
  c6.n_layers = 6;
  std::mt19937_64 rng(1);
  TextEncoder<float> e2(c2, 20, rng), e6(c6, 20, rng);
  EXPECT_EQ(e2.layer_stack_parameter_count(), e6.layer_stack_parameter_count());
  EXPECT_EQ(e2.layer_stack_parameter_count(), TransformerBlock<float>::count_for(16, 32));
  ParamList<float> p2, p6;
  e2.collect(p2);
  e6.collect(p6);
  EXPECT_EQ(count_parameters(p2), count_parameters(p6));
}

TEST(TextEncoder, UnsharedStackGrowsWithDepth) {
  auto c = small_config();
  c.share_layers = false;
  c.n_layers = 3;
  std::mt19937_64 rng(1);
  TextEncoder<float> e(c, 20, rng);
  EXPECT_EQ(e.layer_stack_parameter_count(), 3 * TransformerBlock<float>::count_for(16, 32));
}

TEST(TextEncoder, FactorizedEmbeddingParameterCount) {
  auto c = small_config();
  std::mt19937_64 rng(1);
  TextEncoder<float> e(c, 50, rng);
  ParamList<float> p;
  e.collect(p);
  // word V*E + position max_len*E + segment E + LN 2E + projection (E+1)*d
  const std::size_t E = 8, d = 16, V = 50;
  const std::size_t embed = V * E + 12 * E + E + 2 * E + (E + 1) * d;
  EXPECT_EQ(count_parameters(p), embed + e.layer_stack_parameter_count());
  for (const auto& np : p) EXPECT_EQ(np.group, ParamGroup::text_encoder) << np.name;
}

TEST(TextEncoder, OverlongSequenceNamesMaxLen) {
  std::mt19937_64 rng(1);
  TextEncoder<float> enc(small_config(), 20, rng);
  auto batch = make_text_batch({std::vector<std::size_t>(13, 2)}, 20);
  Graph<float> g(false);
  try {
    enc.forward(g, batch);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("max_len 12"), std::string::npos);
  }
}

TEST(TextEncoder, GradientCheckAtTinyWidth) {
  EncoderConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_width = 8;
  c.embedding_dim = 4;
  c.max_len = 4;
  std::mt19937_64 rng(2);
  TextEncoder<double> enc(c, 6, rng);
  ParamList<double> params;
  enc.collect(params);
  spread_parameters(params, 21);
  auto batch = make_text_batch({{2, 3, 5}, {4}}, 6);
  std::vector<Tensor<double>> inputs;
  for (const auto& p : params) inputs.push_back(p.tensor);
  auto r = finite_diff_check(
      [&](Graph<double>& g) { return probe_sum(g, enc.forward(g, batch).global, 99); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-3) << params[r.worst_input].name << "[" << r.worst_index
                                   << "] analytic " << r.analytic << " numeric " << r.numeric;
}

// --- image encoder --------------------------------------------------------------------

TEST(ImageEncoder, ContextLengthIsPatchesPlusCls) {
  auto c = small_config();
  ImageGeometry geo{8, 3, 4};
  std::mt19937_64 rng(1);
  ImageEncoder<float> enc(c, geo, rng);
  auto b = random_images(3, 8, 3, 4, 2);
  Graph<float> g(false);
  auto out = enc.forward(g, b);
  EXPECT_EQ(out.context.shape(), (Shape{3, 5, 16}));
  EXPECT_EQ(out.global.shape(), (Shape{3, 16}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(out.global[i * 16 + k], out.context[i * 80 + k]);
}

TEST(ImageEncoder, SensitiveToSinglePatch) {
  ImageGeometry geo{8, 3, 4};
  std::mt19937_64 rng(4);
  ImageEncoder<float> enc(small_config(), geo, rng);
  auto a = random_images(1, 8, 3, 4, 9);
  auto b = a;
  // Change only the bottom-right patch.
  for (std::size_t r = 4; r < 8; ++r)
    for (std::size_t c = 4; c < 8; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) b.pixels[(r * 8 + c) * 3 + ch] = 1.0f - a.pixels[(r * 8 + c) * 3 + ch];
  Graph<float> g(false);
  auto oa = enc.forward(g, a), ob = enc.forward(g, b);
  double diff = 0.0;
  for (std::size_t i = 0; i < oa.global.numel(); ++i) diff += std::abs(oa.global[i] - ob.global[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(ImageEncoder, DeterministicInInference) {
  ImageGeometry geo{8, 1, 2};
  std::mt19937_64 rng(4);
  ImageEncoder<float> enc(small_config(), geo, rng);
  auto a = random_images(2, 8, 1, 2, 9);
  Graph<float> g1(false), g2(false);
  auto x = enc.forward(g1, a), y = enc.forward(g2, a);
  for (std::size_t i = 0; i < x.context.numel(); ++i) EXPECT_EQ(x.context[i], y.context[i]);
}

TEST(ImageEncoder, RejectsUnnormalizedPixels) {
  ImageGeometry geo{8, 1, 2};
  std::mt19937_64 rng(4);
  ImageEncoder<float> enc(small_config(), geo, rng);
  auto a = random_images(1, 8, 1, 2, 9);
  a.pixels[0] = 255.0f;
  Graph<float> g(false);
  EXPECT_THROW(enc.forward(g, a), ConfigError);
}

TEST(ImageEncoder, RejectsGeometryMismatch) {
  ImageGeometry geo{8, 1, 2};
  std::mt19937_64 rng(4);
  ImageEncoder<float> enc(small_config(), geo, rng);
  auto a = random_images(1, 8, 3, 2, 9);
  Graph<float> g(false);
  EXPECT_THROW(enc.forward(g, a), ShapeError);
}

TEST(ImageEncoder, ParametersInImageGroup) {
  ImageGeometry geo{8, 3, 4};
  std::mt19937_64 rng(4);
  ImageEncoder<float> enc(small_config(), geo, rng);
  ParamList<float> p;
  enc.collect(p);
  for (const auto& np : p) EXPECT_EQ(np.group, ParamGroup::image_encoder) << np.name;
  // patch (48+1)*16 + cls 16 + position 5*16 + final LN 32
  EXPECT_EQ(count_parameters(p), 49 * 16 + 16 + 80 + 32 + enc.layer_stack_parameter_count());
}

TEST(ImageEncoder, GradientCheckAtTinyWidth) {
  EncoderConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_width = 8;
  ImageGeometry geo{4, 1, 2};
  std::mt19937_64 rng(2);
  ImageEncoder<double> enc(c, geo, rng);
  ParamList<double> params;
  enc.collect(params);
  spread_parameters(params, 5);
  auto batch = random_images(2, 4, 1, 2, 13);
  std::vector<Tensor<double>> inputs;
  for (const auto& p : params) inputs.push_back(p.tensor);
  auto r = finite_diff_check(
      [&](Graph<double>& g) { return probe_sum(g, enc.forward(g, batch).global, 17); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-3) << params[r.worst_input].name << "[" << r.worst_index
                                   << "] analytic " << r.analytic << " numeric " << r.numeric;
}
