#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "mcfnet/graph.hpp"
#include "mcfnet/tensor.hpp"

// Differentiable primitives. Every op takes the graph it records into as
// its first argument; with a non-recording graph (or inputs that do not
// require grad) the op is a plain forward computation.
//
// Broadcasting is limited to bias addition inside linear() and conv1d_relu().
namespace mcfnet::ops {

template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

/// Batched matmul: [G x m x k] . [G x k x n] -> [G x m x n].
template <typename T>
Tensor<T> bmm(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

/// x [... x k] . w [k x n] + bias [n]. An empty bias tensor means no bias.
template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x);
/// tanh approximation.
template <typename T>
Tensor<T> gelu(Graph<T>& g, const Tensor<T>& x);

/// Max-subtracted softmax along `axis`. Throws NumericError on NaN/Inf input.
template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x, std::size_t axis);

/// Normalizes each vector along the last axis (biased variance), then
/// applies gain and bias.
template <typename T>
Tensor<T> layer_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps);

/// ReLU(W . x[t .. t+window-1] + b) for every valid start t.
/// x is [n x d_in] or [B x n x d_in]; weight is [window*d_in x d_out]
/// acting on the window rows laid out back to back.
template <typename T>
Tensor<T> conv1d_relu(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t window);

template <typename T>
Tensor<T> mean_pool(Graph<T>& g, const Tensor<T>& x, std::size_t axis);
/// Gradient goes to the first maximal position along the axis.
template <typename T>
Tensor<T> max_pool(Graph<T>& g, const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& xs, std::size_t axis);
template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(Graph<T>& g, const Tensor<T>& x, const std::vector<std::size_t>& axes);
/// Drops `axis`, keeping position `index`.
template <typename T>
Tensor<T> select(Graph<T>& g, const Tensor<T>& x, std::size_t axis, std::size_t index);
template <typename T>
Tensor<T> slice(Graph<T>& g, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end);

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x);
template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x);

/// Row lookup: table [V x E], ids laid out as `index_shape` -> index_shape + [E].
template <typename T>
Tensor<T> embedding(Graph<T>& g, const Tensor<T>& table, const std::vector<std::size_t>& ids,
                    const Shape& index_shape);

/// Mean over axis 1 of x [B x L x d], counting only positions where mask [B x L] is nonzero.
template <typename T>
Tensor<T> masked_mean(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& mask);

/// Adds a large negative constant to attention scores [B*heads x Lq x Lk]
/// wherever key_mask [B x Lk] is zero.
template <typename T>
Tensor<T> add_key_mask(Graph<T>& g, const Tensor<T>& scores, const Tensor<T>& key_mask,
                       std::size_t heads);

/// Bernoulli(keep_prob) samples as a 0/1 constant tensor.
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double keep_prob, std::mt19937_64& rng);

/// Throws NumericError naming `what` if any value is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& x, const char* what);

}  // namespace mcfnet::ops
