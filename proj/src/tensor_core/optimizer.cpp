#include "mcfnet/optimizer.hpp"

#include <cmath>
#include <string>

namespace mcfnet {

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::text_encoder:
      return "text_encoder";
    case ParamGroup::image_encoder:
      return "image_encoder";
    case ParamGroup::other:
      break;
  }
  return "other";
}

double AdamWConfig::lr_for(ParamGroup group) const {
  switch (group) {
    case ParamGroup::text_encoder:
      return lr_text_encoder;
    case ParamGroup::image_encoder:
      return lr_image_encoder;
    case ParamGroup::other:
      break;
  }
  return lr_other;
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step() {
  std::string missing;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) missing += (missing.empty() ? "" : ", ") + p.name;
  }
  if (!missing.empty()) {
    throw ConfigError("adamw_step: no gradient for parameter(s): " + missing);
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
  const T eps = static_cast<T>(config_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const T lr = static_cast<T>(config_.lr_for(p.group));
    const T decay = T(1) - lr * static_cast<T>(config_.weight_decay);
    auto w = p.tensor.data();
    const auto gr = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] *= decay;
      m[j] = b1 * m[j] + (T(1) - b1) * gr[j];
      v[j] = b2 * v[j] + (T(1) - b2) * gr[j] * gr[j];
      const T mhat = m[j] / static_cast<T>(bc1);
      const T vhat = v[j] / static_cast<T>(bc2);
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace mcfnet
