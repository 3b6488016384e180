#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mcfnet/tensor.hpp"

namespace mcfnet {

/// Learning-rate group a parameter belongs to.
enum class ParamGroup { text_encoder, image_encoder, other };

std::string to_string(ParamGroup group);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group = ParamGroup::other;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
std::size_t count_parameters(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

/// Truncated normal N(0, stddev^2) restricted to +-2 stddev, requiring grad.
template <typename T>
Tensor<T> trunc_normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0 * stddev) z = dist(rng);
    v = static_cast<T>(z);
  }
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  Tensor<T> t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace mcfnet
