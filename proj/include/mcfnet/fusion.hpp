#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mcfnet/attention.hpp"
#include "mcfnet/encoders.hpp"

namespace mcfnet {

enum class RunMode { training, inference };
enum class CrossAttentionMode { sequence, pooled };
enum class Topology { hybrid, merged, interaction };

std::string to_string(CrossAttentionMode mode);
std::string to_string(Topology topology);
CrossAttentionMode cross_attention_mode_from_string(const std::string& s);
Topology topology_from_string(const std::string& s);

struct RegularizationConfig {
  double p = 0.9;      // keep probability
  double alpha = 0.02; // L1 coefficient
  double beta = 0.1;   // L2 coefficient

  std::vector<std::string> validate(const std::string& prefix) const;
};

struct FusionConfig {
  std::size_t d_f = 64;
  std::size_t heads = 2;
  std::size_t ffn_width = 128;
  RegularizationConfig reg;
  CrossAttentionMode mode = CrossAttentionMode::sequence;
  Topology topology = Topology::hybrid;
  bool use_ham = true;  // hybrid attention; off -> O_H from an MLP over the globals
  bool use_rm = true;   // regularization channels; off -> channels pass x through

  std::vector<std::string> validate(const std::string& prefix, std::size_t d_model) const;
};

/// Inverted dropout with keep probability p: x * Bernoulli(p) / p while
/// training, identity at inference.
template <typename T>
Tensor<T> dropout_channel(Graph<T>& g, const Tensor<T>& x, double p, RunMode mode,
                          std::mt19937_64& rng);

/// Elementwise minimizer of (x' - x)^2 + alpha|x'| + beta x'^2:
/// sign(x) * max(|x| - alpha/2, 0) / (1 + beta). Gradient is 1/(1+beta)
/// outside the dead zone and 0 inside (including the kink).
template <typename T>
Tensor<T> elastic_net_channel(Graph<T>& g, const Tensor<T>& x, double alpha, double beta);

/// ReLU(W . [ch1, ch2] + b), mapping 2d -> d_f.
template <typename T>
class UnimodalFusion {
 public:
  UnimodalFusion() = default;
  UnimodalFusion(std::size_t d, std::size_t d_f, std::mt19937_64& rng);

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& ch1, const Tensor<T>& ch2) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  const Tensor<T>& weight() const { return w_; }
  const Tensor<T>& bias() const { return b_; }

 private:
  Tensor<T> w_, b_;
};

/// Self-attention over image regions, average pool, LayerNorm -> I_0.
template <typename T>
class ImageRegionPool {
 public:
  struct Result {
    Tensor<T> regions;  // updated region sequence [B x N x d]
    Tensor<T> pooled;   // I_0 [B x d]
    Tensor<T> weights;  // region self-attention weights (empty when bypassed)
  };

  ImageRegionPool() = default;
  ImageRegionPool(std::size_t d, std::size_t heads, std::size_t ffn_width, std::mt19937_64& rng);

  Result forward(Graph<T>& g, const Tensor<T>& regions) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;

  /// Test hook: replace the attention block by the identity.
  void set_bypass_attention(bool on) { bypass_ = on; }
  const Tensor<T>& norm_gain() const { return ln_g_; }
  const Tensor<T>& norm_bias() const { return ln_b_; }

 private:
  TransformerBlock<T> block_;
  Tensor<T> ln_g_, ln_b_;
  bool bypass_ = false;
};

/// Conv windows 1, 2, 3 (each d -> d with ReLU), max over positions,
/// concat, affine 3d -> d, LayerNorm -> T_0. Pads take part in the max.
template <typename T>
class TextConvPool {
 public:
  TextConvPool() = default;
  TextConvPool(std::size_t d, std::mt19937_64& rng);

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& seq) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;

  const Tensor<T>& conv_weight(std::size_t window) const { return conv_w_.at(window - 1); }
  const Tensor<T>& conv_bias(std::size_t window) const { return conv_b_.at(window - 1); }
  const Tensor<T>& proj_weight() const { return we_; }
  const Tensor<T>& proj_bias() const { return be_; }
  const Tensor<T>& norm_gain() const { return ln_g_; }
  const Tensor<T>& norm_bias() const { return ln_b_; }

 private:
  std::vector<Tensor<T>> conv_w_, conv_b_;
  Tensor<T> we_, be_, ln_g_, ln_b_;
};

/// Bidirectional cross attention producing O_H = I_0' + T_0'.
///
/// sequence mode: I_0' attends from T_0 over the image region sequence and
/// T_0' from I_0 over the text context (pads masked). pooled mode: keys and
/// values are the single pooled vectors, so each output is the value
/// projection of the pooled vector.
template <typename T>
class CrossModalAttention {
 public:
  struct Result {
    Tensor<T> fused;          // O_H [B x d_f]
    Tensor<T> image_prime;    // I_0'
    Tensor<T> text_prime;     // T_0'
    Tensor<T> image_weights;  // [B*heads x 1 x N]
    Tensor<T> text_weights;   // [B*heads x 1 x D]
  };

  CrossModalAttention() = default;
  CrossModalAttention(std::size_t d, std::size_t d_f, std::size_t heads, CrossAttentionMode mode,
                      std::mt19937_64& rng);

  Result forward(Graph<T>& g, const Tensor<T>& text_pooled, const Tensor<T>& image_pooled,
                 const Tensor<T>& text_seq, const Tensor<T>& text_mask,
                 const Tensor<T>& image_seq) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;
  CrossAttentionMode mode() const { return mode_; }

  const MultiHeadAttention<T>& image_attention() const { return to_image_; }
  const MultiHeadAttention<T>& text_attention() const { return to_text_; }

 private:
  CrossAttentionMode mode_ = CrossAttentionMode::sequence;
  MultiHeadAttention<T> to_image_;  // query T_0, keys/values image
  MultiHeadAttention<T> to_text_;   // query I_0, keys/values text
};

/// Attention weights exposed by a topology forward pass for inspection.
template <typename T>
struct TopologyOutput {
  Tensor<T> fused;  // [B x d_f]
  std::vector<Tensor<T>> attention_weights;
};

/// Hybrid topology: region pool + conv pool + cross attention.
template <typename T>
class HybridAttention {
 public:
  HybridAttention() = default;
  HybridAttention(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng);

  TopologyOutput<T> forward(Graph<T>& g, const EncoderOutput<T>& text,
                            const EncoderOutput<T>& image) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;

  ImageRegionPool<T>& region_pool() { return regions_; }
  const TextConvPool<T>& conv_pool() const { return conv_; }
  const CrossModalAttention<T>& cross() const { return cross_; }

 private:
  ImageRegionPool<T> regions_;
  TextConvPool<T> conv_;
  CrossModalAttention<T> cross_;
};

/// Merged-attention baseline: concatenate both sequences, run a text and an
/// image self-attention block over the concatenation, pool each over its own
/// positions, sum, project to d_f.
template <typename T>
class MergedAttention {
 public:
  MergedAttention() = default;
  MergedAttention(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng);

  TopologyOutput<T> forward(Graph<T>& g, const EncoderOutput<T>& text,
                            const EncoderOutput<T>& image) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;

 private:
  TransformerBlock<T> text_block_, image_block_;
  Tensor<T> w_, b_;
};

/// Interaction-encoder baseline: residual cross attention in each direction,
/// then a self-attention block per modality, pool, sum, project to d_f.
template <typename T>
class InteractionEncoder {
 public:
  InteractionEncoder() = default;
  InteractionEncoder(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng);

  TopologyOutput<T> forward(Graph<T>& g, const EncoderOutput<T>& text,
                            const EncoderOutput<T>& image) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
  std::size_t parameter_count() const;

 private:
  MultiHeadAttention<T> text_from_image_, image_from_text_;
  TransformerBlock<T> text_block_, image_block_;
  Tensor<T> w_, b_;
};

template <typename T>
struct FusedFeatures {
  Tensor<T> o_text;   // O_T
  Tensor<T> o_image;  // O_I
  Tensor<T> o_hybrid; // O_H
  std::vector<Tensor<T>> attention_weights;
};

/// Full fusion stage: two regularization channels and a unimodal head per
/// modality, plus the configured topology (or the no-HAM fallback) for O_H.
/// Both encoders must share the width d.
template <typename T>
class FusionModule {
 public:
  FusionModule(std::size_t d, const FusionConfig& cfg, std::mt19937_64& rng);

  /// `rng` drives dropout and is only read in training mode.
  FusedFeatures<T> forward(Graph<T>& g, const EncoderOutput<T>& text,
                           const EncoderOutput<T>& image, RunMode mode,
                           std::mt19937_64& rng) const;

  void collect(ParamList<T>& out) const;
  /// Parameters of the component producing O_H.
  std::size_t interaction_parameter_count() const;
  const FusionConfig& config() const { return cfg_; }

 private:
  FusionConfig cfg_;
  UnimodalFusion<T> text_head_, image_head_;
  std::optional<HybridAttention<T>> hybrid_;
  std::optional<MergedAttention<T>> merged_;
  std::optional<InteractionEncoder<T>> interaction_;
  std::optional<UnimodalFusion<T>> no_ham_;
};

}  // namespace mcfnet
