#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "mcfnet/errors.hpp"

namespace mcfnet {

using Shape = std::vector<std::size_t>;

enum class DType { float32, float64 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::float32 : DType::float64;
}

std::string to_string(DType dtype);
DType dtype_from_string(const std::string& name);

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, so a parameter held by a
/// module and by the optimizer is the same object. Use clone() or detach()
/// for an independent buffer.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    s_->values.assign(numel_of(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
    if (values.size() != numel_of(shape)) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    s_->shape = std::move(shape);
    s_->values = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t numel() const { return s_->values.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<T> data() { return s_->values; }
  std::span<const T> data() const { return s_->values; }
  T& operator[](std::size_t i) { return s_->values[i]; }
  const T& operator[](std::size_t i) const { return s_->values[i]; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return s_->values[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (!on) s_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }

  /// Gradient buffer, zero-allocated on first use. Const because the handle
  /// is shared: backward closures accumulate through captured const copies.
  std::span<T> grad_mut() const {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    return s_->grad;
  }

  void zero_grad() {
    if (s_->requires_grad) s_->grad.assign(s_->values.size(), T(0));
  }
  void clear_grad() const { s_->grad.clear(); }

  std::optional<std::size_t> node_id() const { return s_->node_id; }
  void set_node_id(std::optional<std::size_t> id) { s_->node_id = id; }

  /// Same values in a fresh buffer, outside any graph, never requiring grad.
  Tensor detach() const { return Tensor(shape(), std::vector<T>(s_->values)); }
  Tensor clone() const { return detach(); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
    std::optional<std::size_t> node_id;
  };
  std::shared_ptr<Storage> s_;
};

/// Converts values between precisions; the result never requires grad.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(t[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace mcfnet
