#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mcfnet/param.hpp"

namespace mcfnet {

struct AdamWConfig {
  double lr_text_encoder = 1e-5;
  double lr_image_encoder = 1e-4;
  double lr_other = 1e-4;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  double lr_for(ParamGroup group) const;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
template <typename T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWConfig config);

  /// One update of every registered parameter. Throws ConfigError naming
  /// each parameter that has no gradient buffer.
  void step();

  /// Zero-fills every parameter gradient (allocating it if needed).
  void zero_grad();

  std::uint64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  const ParamList<T>& params() const { return params_; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  ParamList<T> params_;
  AdamWConfig config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::uint64_t step_ = 0;
};

}  // namespace mcfnet
