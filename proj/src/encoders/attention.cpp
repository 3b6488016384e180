#include "mcfnet/attention.hpp"

#include <cmath>

namespace mcfnet {

namespace {

// [B x L x H*dh] -> [B*H x L x dh]
template <typename T>
Tensor<T> split_heads(Graph<T>& g, const Tensor<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2), dh = D / heads;
  auto r = ops::reshape(g, x, {B, L, heads, dh});
  auto p = ops::permute(g, r, {0, 2, 1, 3});
  return ops::reshape(g, p, {B * heads, L, dh});
}

// [B*H x L x dh] -> [B x L x H*dh]
template <typename T>
Tensor<T> merge_heads(Graph<T>& g, const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  const std::size_t L = x.dim(1), dh = x.dim(2);
  auto r = ops::reshape(g, x, {batch, heads, L, dh});
  auto p = ops::permute(g, r, {0, 2, 1, 3});
  return ops::reshape(g, p, {batch, L, heads * dh});
}

}  // namespace

template <typename T>
Tensor<T> attention_logits(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, T scale) {
  auto kt = ops::permute(g, k, {0, 2, 1});
  return ops::scale(g, ops::bmm(g, q, kt), scale);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t d_query, std::size_t d_kv,
                                          std::size_t d_out, std::size_t heads,
                                          bool output_projection, std::mt19937_64& rng)
    : d_out_(d_out), heads_(heads), out_proj_(output_projection) {
  if (heads == 0 || d_out % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d_out) + " is not divisible into " +
                      std::to_string(heads) + " heads");
  }
  wq_ = trunc_normal_param<T>({d_query, d_out}, kInitStd, rng);
  bq_ = constant_param<T>({d_out}, T(0));
  wk_ = trunc_normal_param<T>({d_kv, d_out}, kInitStd, rng);
  bk_ = constant_param<T>({d_out}, T(0));
  wv_ = trunc_normal_param<T>({d_kv, d_out}, kInitStd, rng);
  bv_ = constant_param<T>({d_out}, T(0));
  if (out_proj_) {
    wo_ = trunc_normal_param<T>({d_out, d_out}, kInitStd, rng);
    bo_ = constant_param<T>({d_out}, T(0));
  }
}

template <typename T>
typename MultiHeadAttention<T>::Result MultiHeadAttention<T>::forward(
    Graph<T>& g, const Tensor<T>& query, const Tensor<T>& kv, const Tensor<T>* key_mask) const {
  if (query.rank() != 3 || kv.rank() != 3 || query.dim(0) != kv.dim(0) ||
      query.dim(2) != wq_.dim(0) || kv.dim(2) != wk_.dim(0)) {
    throw ShapeError("attention: query " + shape_str(query.shape()) + " and key/value " +
                     shape_str(kv.shape()) + " do not fit weights " + shape_str(wq_.shape()) +
                     " / " + shape_str(wk_.shape()));
  }
  const std::size_t B = query.dim(0);
  auto q = split_heads(g, ops::linear(g, query, wq_, bq_), heads_);
  auto k = split_heads(g, ops::linear(g, kv, wk_, bk_), heads_);
  auto v = split_heads(g, ops::linear(g, kv, wv_, bv_), heads_);
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim()));
  auto logits = attention_logits(g, q, k, scale);
  if (key_mask) logits = ops::add_key_mask(g, logits, *key_mask, heads_);
  auto weights = ops::softmax(g, logits, 2);
  auto ctx = merge_heads(g, ops::bmm(g, weights, v), B, heads_);
  if (out_proj_) ctx = ops::linear(g, ctx, wo_, bo_);
  return {ctx, weights};
}

template <typename T>
void MultiHeadAttention<T>::collect(ParamList<T>& out, const std::string& prefix,
                                    ParamGroup group) const {
  out.push_back({prefix + ".w_q", wq_, group});
  out.push_back({prefix + ".b_q", bq_, group});
  out.push_back({prefix + ".w_k", wk_, group});
  out.push_back({prefix + ".b_k", bk_, group});
  out.push_back({prefix + ".w_v", wv_, group});
  out.push_back({prefix + ".b_v", bv_, group});
  if (out_proj_) {
    out.push_back({prefix + ".w_o", wo_, group});
    out.push_back({prefix + ".b_o", bo_, group});
  }
}

template <typename T>
std::size_t MultiHeadAttention<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "", ParamGroup::other);
  return count_parameters(p);
}

template <typename T>
std::size_t MultiHeadAttention<T>::count_for(std::size_t d_query, std::size_t d_kv,
                                             std::size_t d_out, bool output_projection) {
  std::size_t n = (d_query + 1) * d_out + 2 * (d_kv + 1) * d_out;
  if (output_projection) n += (d_out + 1) * d_out;
  return n;
}

template <typename T>
TransformerBlock<T>::TransformerBlock(std::size_t d_model, std::size_t heads,
                                      std::size_t ffn_width, bool pre_norm, std::mt19937_64& rng)
    : pre_norm_(pre_norm), attn_(d_model, d_model, d_model, heads, true, rng) {
  ln1_g_ = constant_param<T>({d_model}, T(1));
  ln1_b_ = constant_param<T>({d_model}, T(0));
  ln2_g_ = constant_param<T>({d_model}, T(1));
  ln2_b_ = constant_param<T>({d_model}, T(0));
  w1_ = trunc_normal_param<T>({d_model, ffn_width}, kInitStd, rng);
  b1_ = constant_param<T>({ffn_width}, T(0));
  w2_ = trunc_normal_param<T>({ffn_width, d_model}, kInitStd, rng);
  b2_ = constant_param<T>({d_model}, T(0));
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(Graph<T>& g, const Tensor<T>& x,
                                       const Tensor<T>* key_mask) const {
  return forward(g, x, key_mask, nullptr);
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(Graph<T>& g, const Tensor<T>& x, const Tensor<T>* key_mask,
                                       Tensor<T>* attention_weights) const {
  const T eps = static_cast<T>(kLayerNormEps);
  auto ffn = [&](const Tensor<T>& h) {
    return ops::linear(g, ops::gelu(g, ops::linear(g, h, w1_, b1_)), w2_, b2_);
  };
  if (pre_norm_) {
    auto h = ops::layer_norm(g, x, ln1_g_, ln1_b_, eps);
    auto a = attn_.forward(g, h, h, key_mask);
    if (attention_weights) *attention_weights = a.weights;
    auto x1 = ops::add(g, x, a.out);
    auto h2 = ops::layer_norm(g, x1, ln2_g_, ln2_b_, eps);
    return ops::add(g, x1, ffn(h2));
  }
  auto a = attn_.forward(g, x, x, key_mask);
  if (attention_weights) *attention_weights = a.weights;
  auto x1 = ops::layer_norm(g, ops::add(g, x, a.out), ln1_g_, ln1_b_, eps);
  return ops::layer_norm(g, ops::add(g, x1, ffn(x1)), ln2_g_, ln2_b_, eps);
}

template <typename T>
void TransformerBlock<T>::collect(ParamList<T>& out, const std::string& prefix,
                                  ParamGroup group) const {
  attn_.collect(out, prefix + ".attn", group);
  out.push_back({prefix + ".ln1.gain", ln1_g_, group});
  out.push_back({prefix + ".ln1.bias", ln1_b_, group});
  out.push_back({prefix + ".ln2.gain", ln2_g_, group});
  out.push_back({prefix + ".ln2.bias", ln2_b_, group});
  out.push_back({prefix + ".ffn.w1", w1_, group});
  out.push_back({prefix + ".ffn.b1", b1_, group});
  out.push_back({prefix + ".ffn.w2", w2_, group});
  out.push_back({prefix + ".ffn.b2", b2_, group});
}

template <typename T>
std::size_t TransformerBlock<T>::parameter_count() const {
  ParamList<T> p;
  collect(p, "", ParamGroup::other);
  return count_parameters(p);
}

template <typename T>
std::size_t TransformerBlock<T>::count_for(std::size_t d_model, std::size_t ffn_width) {
  return MultiHeadAttention<T>::count_for(d_model, d_model, d_model, true) + 4 * d_model +
         (d_model + 1) * ffn_width + (ffn_width + 1) * d_model;
}

template Tensor<float> attention_logits<float>(Graph<float>&, const Tensor<float>&,
                                               const Tensor<float>&, float);
template Tensor<double> attention_logits<double>(Graph<double>&, const Tensor<double>&,
                                                 const Tensor<double>&, double);
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;

}  // namespace mcfnet
