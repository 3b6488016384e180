#include "mcfnet/fusion.hpp"

#include <cmath>

namespace mcfnet {

std::string to_string(CrossAttentionMode mode) {
  return mode == CrossAttentionMode::sequence ? "sequence" : "pooled";
}

std::string to_string(Topology topology) {
  switch (topology) {
    case Topology::hybrid: return "hybrid";
    case Topology::merged: return "merged";
    case Topology::interaction: return "interaction";
  }
  return "?";
}

CrossAttentionMode cross_attention_mode_from_string(const std::string& s) {
  if (s == "sequence") return CrossAttentionMode::sequence;
  if (s == "pooled") return CrossAttentionMode::pooled;
  throw ConfigError("unknown cross-attention mode '" + s + "' (expected sequence or pooled)");
}

Topology topology_from_string(const std::string& s) {
  if (s == "hybrid") return Topology::hybrid;
  if (s == "merged") return Topology::merged;
  if (s == "interaction") return Topology::interaction;
  throw ConfigError("unknown topology '" + s + "' (expected hybrid, merged or interaction)");
}

std::vector<std::string> RegularizationConfig::validate(const std::string& prefix) const {
  std::vector<std::string> errs;
  if (!(p > 0.0 && p <= 1.0)) {
    errs.push_back(prefix + "p = " + std::to_string(p) + " must lie in (0, 1]");
  }
  if (!(alpha >= 0.0)) errs.push_back(prefix + "alpha must be >= 0");
  if (!(beta >= 0.0)) errs.push_back(prefix + "beta must be >= 0");
  return errs;
}

std::vector<std::string> FusionConfig::validate(const std::string& prefix,
                                                std::size_t d_model) const {
  auto errs = reg.validate(prefix + "reg.");
  if (d_f == 0) errs.push_back(prefix + "d_f must be positive");
  if (ffn_width == 0) errs.push_back(prefix + "ffn_width must be positive");
  if (heads == 0) {
    errs.push_back(prefix + "heads must be positive");
  } else {
    if (d_f % heads != 0) {
      errs.push_back(prefix + "d_f " + std::to_string(d_f) + " is not divisible by heads " +
                     std::to_string(heads));
    }
    if (d_model % heads != 0) {
      errs.push_back(prefix + "encoder width " + std::to_string(d_model) +
                     " is not divisible by heads " + std::to_string(heads));
    }
  }
  return errs;
}

namespace {

void throw_if_invalid(const std::vector<std::string>& errs) {
  if (errs.empty()) return;
  std::string msg;
  for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
  throw ConfigError(msg);
}

template <typename T>
void require_width(const Tensor<T>& x, std::size_t width, const char* what) {
  if (x.rank() == 0 || x.shape().back() != width) {
    throw ShapeError(std::string(what) + ": expected width " + std::to_string(width) + ", got " +
                     shape_str(x.shape()));
  }
}

// Patch tokens without the leading CLS position.
template <typename T>
Tensor<T> image_regions(Graph<T>& g, const EncoderOutput<T>& image) {
  const std::size_t L = image.context.dim(1);
  if (L < 2) throw ShapeError("image context needs CLS plus at least one region");
  return ops::slice(g, image.context, 1, 1, L);
}

template <typename T>
Tensor<T> as_sequence(Graph<T>& g, const Tensor<T>& v) {
  return ops::reshape(g, v, {v.dim(0), 1, v.dim(1)});
}

template <typename T>
Tensor<T> as_vector(Graph<T>& g, const Tensor<T>& s) {
  return ops::reshape(g, s, {s.dim(0), s.dim(2)});
}

// Mask covering positions [begin, end) of a length-`total` sequence.
template <typename T>
Tensor<T> span_mask(std::size_t batch, std::size_t total, std::size_t begin, std::size_t end) {
  Tensor<T> m({batch, total});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = begin; t < end; ++t) m[b * total + t] = T(1);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Channels

template <typename T>
Tensor<T> dropout_channel(Graph<T>& g, const Tensor<T>& x, double p, RunMode mode,
                          std::mt19937_64& rng) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ConfigError("dropout keep probability p = " + std::to_string(p) +
                      " must lie in (0, 1]");
  }
  if (mode == RunMode::inference || p == 1.0) return x;
  auto mask = ops::dropout_mask<T>(x.shape(), p, rng);
  return ops::scale(g, ops::mul(g, x, mask), static_cast<T>(1.0 / p));
}

template <typename T>
Tensor<T> elastic_net_channel(Graph<T>& g, const Tensor<T>& x, double alpha, double beta) {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) {
    throw ConfigError("elastic-net coefficients must be >= 0 (alpha = " + std::to_string(alpha) +
                      ", beta = " + std::to_string(beta) + ")");
  }
  const T half = static_cast<T>(alpha / 2.0);
  const T shrink = static_cast<T>(1.0 / (1.0 + beta));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T mag = std::abs(x[i]) - half;
    out[i] = mag > T(0) ? std::copysign(mag, x[i]) * shrink : T(0);
  }
  if (g.needs_grad({&x})) {
    g.record("elastic_net", {x}, out, [x, out, half, shrink]() {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (std::abs(x[i]) > half) gx[i] += go[i] * shrink;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// UnimodalFusion

template <typename T>
UnimodalFusion<T>::UnimodalFusion(std::size_t d, std::size_t d_f, std::mt19937_64& rng) {
  w_ = trunc_normal_param<T>({2 * d, d_f}, kInitStd, rng);
  b_ = constant_param<T>({d_f}, T(0));
}

template <typename T>
Tensor<T> UnimodalFusion<T>::forward(Graph<T>& g, const Tensor<T>& ch1,
                                     const Tensor<T>& ch2) const {
  if (ch1.shape() != ch2.shape() || ch1.rank() != 2 || 2 * ch1.dim(1) != w_.dim(0)) {
    throw ShapeError("unimodal fusion: channels " + shape_str(ch1.shape()) + " and " +
                     shape_str(ch2.shape()) + " do not fit weight " + shape_str(w_.shape()));
  }
  return ops::relu(g, ops::linear(g, ops::concat(g, {ch1, ch2}, 1), w_, b_));
}

template <typename T>
void UnimodalFusion<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".w", w_, ParamGroup::other});
  out.push_back({prefix + ".b", b_, ParamGroup::other});
}

// ---------------------------------------------------------------------------
// ImageRegionPool

template <typename T>
ImageRegionPool<T>::ImageRegionPool(std::size_t d, std::size_t heads, std::size_t ffn_width,
                                    std::mt19937_64& rng)
    : block_(d, heads, ffn_width, /*pre_norm=*/true, rng) {
  ln_g_ = constant_param<T>({d}, T(1));
  ln_b_ = constant_param<T>({d}, T(0));
}

template <typename T>
typename ImageRegionPool<T>::Result ImageRegionPool<T>::forward(Graph<T>& g,
                                                                const Tensor<T>& regions) const {
  if (regions.rank() != 3 || regions.dim(1) == 0) {
    throw ShapeError("region pool needs a non-empty [B x N x d] sequence, got " +
                     shape_str(regions.shape()));
  }
  require_width(regions, ln_g_.dim(0), "region pool");
  Result r;
  if (bypass_) {
    r.regions = regions;
  } else {
    r.regions = block_.forward(g, regions, nullptr, &r.weights);
  }
  r.pooled = ops::layer_norm(g, ops::mean_pool(g, r.regions, 1), ln_g_, ln_b_,
                             static_cast<T>(kLayerNormEps));
  return r;
}

template <typename T>
void ImageRegionPool<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  block_.collect(out, prefix + ".block", ParamGroup::other);
  out.push_back({prefix + ".ln.gain", ln_g_, ParamGroup::other});
  out.push_back({prefix + ".ln.bias", ln_b_, ParamGroup::other});
}

template <typename T>
std::size_t ImageRegionPool<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "");
  return count_parameters(p);
}

// ---------------------------------------------------------------------------
// TextConvPool

template <typename T>
TextConvPool<T>::TextConvPool(std::size_t d, std::mt19937_64& rng) {
  for (std::size_t w = 1; w <= 3; ++w) {
    conv_w_.push_back(trunc_normal_param<T>({w * d, d}, kInitStd, rng));
    conv_b_.push_back(constant_param<T>({d}, T(0)));
  }
  we_ = trunc_normal_param<T>({3 * d, d}, kInitStd, rng);
  be_ = constant_param<T>({d}, T(0));
  ln_g_ = constant_param<T>({d}, T(1));
  ln_b_ = constant_param<T>({d}, T(0));
}

template <typename T>
Tensor<T> TextConvPool<T>::forward(Graph<T>& g, const Tensor<T>& seq) const {
  if (seq.rank() != 3) throw ShapeError("text conv pool expects [B x D x d]");
  if (seq.dim(1) < 3) {
    throw ShapeError("text conv pool needs at least 3 positions, got " +
                     std::to_string(seq.dim(1)) + "; pad sentences to length >= 3");
  }
  require_width(seq, be_.dim(0), "text conv pool");
  std::vector<Tensor<T>> q;
  for (std::size_t w = 1; w <= 3; ++w) {
    q.push_back(ops::max_pool(g, ops::conv1d_relu(g, seq, conv_w_[w - 1], conv_b_[w - 1], w), 1));
  }
  auto h = ops::linear(g, ops::concat(g, q, 1), we_, be_);
  return ops::layer_norm(g, h, ln_g_, ln_b_, static_cast<T>(kLayerNormEps));
}

template <typename T>
void TextConvPool<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t w = 0; w < 3; ++w) {
    out.push_back({prefix + ".conv" + std::to_string(w + 1) + ".w", conv_w_[w], ParamGroup::other});
    out.push_back({prefix + ".conv" + std::to_string(w + 1) + ".b", conv_b_[w], ParamGroup::other});
  }
  out.push_back({prefix + ".proj.w", we_, ParamGroup::other});
  out.push_back({prefix + ".proj.b", be_, ParamGroup::other});
  out.push_back({prefix + ".ln.gain", ln_g_, ParamGroup::other});
  out.push_back({prefix + ".ln.bias", ln_b_, ParamGroup::other});
}

template <typename T>
std::size_t TextConvPool<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "");
  return count_parameters(p);
}

// ---------------------------------------------------------------------------
// CrossModalAttention

template <typename T>
CrossModalAttention<T>::CrossModalAttention(std::size_t d, std::size_t d_f, std::size_t heads,
                                            CrossAttentionMode mode, std::mt19937_64& rng)
    : mode_(mode),
      to_image_(d, d, d_f, heads, false, rng),
      to_text_(d, d, d_f, heads, false, rng) {}

template <typename T>
typename CrossModalAttention<T>::Result CrossModalAttention<T>::forward(
    Graph<T>& g, const Tensor<T>& text_pooled, const Tensor<T>& image_pooled,
    const Tensor<T>& text_seq, const Tensor<T>& text_mask, const Tensor<T>& image_seq) const {
  if (text_pooled.shape() != image_pooled.shape()) {
    throw ShapeError("cross attention: pooled text " + shape_str(text_pooled.shape()) +
                     " and image " + shape_str(image_pooled.shape()) + " differ");
  }
  auto tq = as_sequence(g, text_pooled);
  auto iq = as_sequence(g, image_pooled);
  Result r;
  typename MultiHeadAttention<T>::Result ia, ta;
  if (mode_ == CrossAttentionMode::sequence) {
    ia = to_image_.forward(g, tq, image_seq);
    ta = to_text_.forward(g, iq, text_seq, &text_mask);
  } else {
    ia = to_image_.forward(g, tq, iq);
    ta = to_text_.forward(g, iq, tq);
  }
  r.image_prime = as_vector(g, ia.out);
  r.text_prime = as_vector(g, ta.out);
  r.image_weights = ia.weights;
  r.text_weights = ta.weights;
  r.fused = ops::add(g, r.image_prime, r.text_prime);
  return r;
}

template <typename T>
void CrossModalAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  to_image_.collect(out, prefix + ".to_image", ParamGroup::other);
  to_text_.collect(out, prefix + ".to_text", ParamGroup::other);
}

template <typename T>
std::size_t CrossModalAttention<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "");
  return count_parameters(p);
}

// ---------------------------------------------------------------------------
// Topologies

template <typename T>
HybridAttention<T>::HybridAttention(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng)
    : regions_(d, cfg.heads, cfg.ffn_width, rng),
      conv_(d, rng),
      cross_(d, cfg.d_f, cfg.heads, cfg.mode, rng) {}

template <typename T>
TopologyOutput<T> HybridAttention<T>::forward(Graph<T>& g, const EncoderOutput<T>& text,
                                              const EncoderOutput<T>& image) const {
  auto reg = regions_.forward(g, image_regions(g, image));
  auto t0 = conv_.forward(g, text.context);
  auto c = cross_.forward(g, t0, reg.pooled, text.context, text.mask, reg.regions);
  TopologyOutput<T> out{c.fused, {}};
  if (reg.weights.numel() > 0) out.attention_weights.push_back(reg.weights);
  out.attention_weights.push_back(c.image_weights);
  out.attention_weights.push_back(c.text_weights);
  return out;
}

template <typename T>
void HybridAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  regions_.collect(out, prefix + ".regions");
  conv_.collect(out, prefix + ".conv");
  cross_.collect(out, prefix + ".cross");
}

template <typename T>
std::size_t HybridAttention<T>::parameter_count() const {
  return regions_.parameter_count() + conv_.parameter_count() + cross_.parameter_count();
}

template <typename T>
MergedAttention<T>::MergedAttention(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng)
    : text_block_(d, cfg.heads, cfg.ffn_width, true, rng),
      image_block_(d, cfg.heads, cfg.ffn_width, true, rng) {
  w_ = trunc_normal_param<T>({d, cfg.d_f}, kInitStd, rng);
  b_ = constant_param<T>({cfg.d_f}, T(0));
}

template <typename T>
TopologyOutput<T> MergedAttention<T>::forward(Graph<T>& g, const EncoderOutput<T>& text,
                                              const EncoderOutput<T>& image) const {
  auto regions = image_regions(g, image);
  const std::size_t B = text.context.dim(0), D = text.context.dim(1), N = regions.dim(1);
  auto seq = ops::concat(g, {text.context, regions}, 1);
  auto key_mask = span_mask<T>(B, D + N, D, D + N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < D; ++t) key_mask[b * (D + N) + t] = text.mask[b * D + t];

  TopologyOutput<T> out;
  Tensor<T> wt, wi;
  auto ht = text_block_.forward(g, seq, &key_mask, &wt);
  auto hi = image_block_.forward(g, seq, &key_mask, &wi);
  auto text_only = key_mask.clone();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = D; t < D + N; ++t) text_only[b * (D + N) + t] = T(0);
  auto pooled = ops::add(g, ops::masked_mean(g, ht, text_only),
                         ops::masked_mean(g, hi, span_mask<T>(B, D + N, D, D + N)));
  out.fused = ops::linear(g, pooled, w_, b_);
  out.attention_weights = {wt, wi};
  return out;
}

template <typename T>
void MergedAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  text_block_.collect(out, prefix + ".text_block", ParamGroup::other);
  image_block_.collect(out, prefix + ".image_block", ParamGroup::other);
  out.push_back({prefix + ".out.w", w_, ParamGroup::other});
  out.push_back({prefix + ".out.b", b_, ParamGroup::other});
}

template <typename T>
std::size_t MergedAttention<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "");
  return count_parameters(p);
}

template <typename T>
InteractionEncoder<T>::InteractionEncoder(std::size_t d, const FusionConfig& cfg,
                                          std::mt19937_64& rng)
    : text_from_image_(d, d, d, cfg.heads, true, rng),
      image_from_text_(d, d, d, cfg.heads, true, rng),
      text_block_(d, cfg.heads, cfg.ffn_width, true, rng),
      image_block_(d, cfg.heads, cfg.ffn_width, true, rng) {
  w_ = trunc_normal_param<T>({d, cfg.d_f}, kInitStd, rng);
  b_ = constant_param<T>({cfg.d_f}, T(0));
}

template <typename T>
TopologyOutput<T> InteractionEncoder<T>::forward(Graph<T>& g, const EncoderOutput<T>& text,
                                                 const EncoderOutput<T>& image) const {
  auto regions = image_regions(g, image);
  auto ct = text_from_image_.forward(g, text.context, regions);
  auto ci = image_from_text_.forward(g, regions, text.context, &text.mask);
  auto t1 = ops::add(g, text.context, ct.out);
  auto i1 = ops::add(g, regions, ci.out);
  Tensor<T> wt, wi;
  auto t2 = text_block_.forward(g, t1, &text.mask, &wt);
  auto i2 = image_block_.forward(g, i1, nullptr, &wi);
  auto pooled = ops::add(g, ops::masked_mean(g, t2, text.mask), ops::mean_pool(g, i2, 1));
  TopologyOutput<T> out;
  out.fused = ops::linear(g, pooled, w_, b_);
  out.attention_weights = {ct.weights, ci.weights, wt, wi};
  return out;
}

template <typename T>
void InteractionEncoder<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  text_from_image_.collect(out, prefix + ".text_from_image", ParamGroup::other);
  image_from_text_.collect(out, prefix + ".image_from_text", ParamGroup::other);
  text_block_.collect(out, prefix + ".text_block", ParamGroup::other);
  image_block_.collect(out, prefix + ".image_block", ParamGroup::other);
  out.push_back({prefix + ".out.w", w_, ParamGroup::other});
  out.push_back({prefix + ".out.b", b_, ParamGroup::other});
}

template <typename T>
std::size_t InteractionEncoder<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "");
  return count_parameters(p);
}

// ---------------------------------------------------------------------------
// FusionModule

template <typename T>
FusionModule<T>::FusionModule(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  throw_if_invalid(cfg.validate("fusion: ", d));
  text_head_ = UnimodalFusion<T>(d, cfg.d_f, rng);
  image_head_ = UnimodalFusion<T>(d, cfg.d_f, rng);
  if (!cfg.use_ham) {
    no_ham_.emplace(d, cfg.d_f, rng);
    return;
  }
  switch (cfg.topology) {
    case Topology::hybrid: hybrid_.emplace(d, cfg, rng); break;
    case Topology::merged: merged_.emplace(d, cfg, rng); break;
    case Topology::interaction: interaction_.emplace(d, cfg, rng); break;
  }
}

template <typename T>
FusedFeatures<T> FusionModule<T>::forward(Graph<T>& g, const EncoderOutput<T>& text,
                                          const EncoderOutput<T>& image, RunMode mode,
                                          std::mt19937_64& rng) const {
  if (text.global.shape() != image.global.shape()) {
    throw ShapeError("fusion: text global " + shape_str(text.global.shape()) +
                     " and image global " + shape_str(image.global.shape()) + " differ");
  }
  FusedFeatures<T> f;
  auto channels = [&](const Tensor<T>& x) -> std::pair<Tensor<T>, Tensor<T>> {
    if (!cfg_.use_rm) return {x, x};
    return {dropout_channel(g, x, cfg_.reg.p, mode, rng),
            elastic_net_channel(g, x, cfg_.reg.alpha, cfg_.reg.beta)};
  };
  auto [t1, t2] = channels(text.global);
  auto [i1, i2] = channels(image.global);
  f.o_text = text_head_.forward(g, t1, t2);
  f.o_image = image_head_.forward(g, i1, i2);

  TopologyOutput<T> h;
  if (no_ham_) {
    h.fused = no_ham_->forward(g, text.global, image.global);
  } else if (hybrid_) {
    h = hybrid_->forward(g, text, image);
  } else if (merged_) {
    h = merged_->forward(g, text, image);
  } else {
    h = interaction_->forward(g, text, image);
  }
  f.o_hybrid = h.fused;
  f.attention_weights = std::move(h.attention_weights);
  return f;
}

template <typename T>
void FusionModule<T>::collect(ParamList<T>& out) const {
  text_head_.collect(out, "fusion.text_head");
  image_head_.collect(out, "fusion.image_head");
  if (no_ham_) no_ham_->collect(out, "fusion.no_ham");
  if (hybrid_) hybrid_->collect(out, "fusion.hybrid");
  if (merged_) merged_->collect(out, "fusion.merged");
  if (interaction_) interaction_->collect(out, "fusion.interaction");
}

template <typename T>
std::size_t FusionModule<T>::interaction_parameter_count() const {
  if (hybrid_) return hybrid_->parameter_count();
  if (merged_) return merged_->parameter_count();
  if (interaction_) return interaction_->parameter_count();
  ParamList<T> p;
  no_ham_->collect(p, "");
  return count_parameters(p);
}

#define MCFNET_INSTANTIATE_FUSION(T)                                                          \
  template Tensor<T> dropout_channel<T>(Graph<T>&, const Tensor<T>&, double, RunMode,         \
                                        std::mt19937_64&);                                    \
  template Tensor<T> elastic_net_channel<T>(Graph<T>&, const Tensor<T>&, double, double);     \
  template class UnimodalFusion<T>;                                                           \
  template class ImageRegionPool<T>;                                                          \
  template class TextConvPool<T>;                                                             \
  template class CrossModalAttention<T>;                                                      \
  template class HybridAttention<T>;                                                          \
  template class MergedAttention<T>;                                                          \
  template class InteractionEncoder<T>;                                                       \
  template class FusionModule<T>;

MCFNET_INSTANTIATE_FUSION(float)
MCFNET_INSTANTIATE_FUSION(double)

#undef MCFNET_INSTANTIATE_FUSION

}  // namespace mcfnet
