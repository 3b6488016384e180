#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "mcfnet/ops.hpp"
#include "mcfnet/param.hpp"

namespace mcfnet {

/// Scaled dot-product logits q . k^T * scale for q [G x Lq x dk], k [G x Lk x dk].
template <typename T>
Tensor<T> attention_logits(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, T scale);

/// Multi-head attention with separate query and key/value inputs.
///
/// Queries come from `query` [B x Lq x d_query], keys and values from
/// `kv` [B x Lk x d_kv]. Self-attention passes the same tensor twice.
/// The optional output projection maps the concatenated heads back to d_out.
template <typename T>
class MultiHeadAttention {
 public:
  struct Result {
    Tensor<T> out;      // [B x Lq x d_out]
    Tensor<T> weights;  // [B*heads x Lq x Lk], rows sum to 1
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_query, std::size_t d_kv, std::size_t d_out, std::size_t heads,
                     bool output_projection, std::mt19937_64& rng);

  Result forward(Graph<T>& g, const Tensor<T>& query, const Tensor<T>& kv,
                 const Tensor<T>* key_mask = nullptr) const;

  void collect(ParamList<T>& out, const std::string& prefix, ParamGroup group) const;
  std::size_t parameter_count() const;
  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return d_out_ / heads_; }
  const Tensor<T>& value_weight() const { return wv_; }
  const Tensor<T>& value_bias() const { return bv_; }

  /// Closed-form parameter count for the given dimensions.
  static std::size_t count_for(std::size_t d_query, std::size_t d_kv, std::size_t d_out,
                               bool output_projection);

 private:
  std::size_t d_out_ = 0;
  std::size_t heads_ = 1;
  bool out_proj_ = false;
  Tensor<T> wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
};

/// Transformer encoder layer: self-attention and a GELU feed-forward
/// network, each wrapped in a residual connection and LayerNorm. With
/// pre_norm the LayerNorm is applied to the sublayer input (ViT); otherwise
/// to the residual sum (BERT/ALBERT).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d_model, std::size_t heads, std::size_t ffn_width, bool pre_norm,
                   std::mt19937_64& rng);

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x, const Tensor<T>* key_mask = nullptr) const;

  /// Same as forward, also exposing the attention weights.
  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x, const Tensor<T>* key_mask,
                    Tensor<T>* attention_weights) const;

  void collect(ParamList<T>& out, const std::string& prefix, ParamGroup group) const;
  std::size_t parameter_count() const;
  static std::size_t count_for(std::size_t d_model, std::size_t ffn_width);

 private:
  bool pre_norm_ = true;
  MultiHeadAttention<T> attn_;
  Tensor<T> ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  Tensor<T> w1_, b1_, w2_, b2_;
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

}  // namespace mcfnet
