#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mcfnet/ops.hpp"
#include "mcfnet/param.hpp"

namespace mcfnet {

enum class Branch { text, interaction, image };
enum class VoteStrategy { confidence, learned, uniform };

std::string to_string(Branch branch);
std::string to_string(VoteStrategy strategy);
VoteStrategy vote_strategy_from_string(const std::string& s);

template <typename T>
struct BranchPrediction {
  Tensor<T> logits;  // [B x n_cls]
  Tensor<T> probs;   // row softmax of logits
  Branch branch = Branch::interaction;
};

/// Affine map followed by a row softmax; one independent instance per branch.
template <typename T>
class BranchClassifier {
 public:
  BranchClassifier() = default;
  BranchClassifier(std::size_t d_f, std::size_t n_classes, Branch branch, std::mt19937_64& rng);

  BranchPrediction<T> forward(Graph<T>& g, const Tensor<T>& x) const;
  void collect(ParamList<T>& out) const;
  const Tensor<T>& weight() const { return w_; }
  const Tensor<T>& bias() const { return b_; }
  Branch branch() const { return branch_; }

 private:
  Branch branch_ = Branch::interaction;
  Tensor<T> w_, b_;
};

inline constexpr double kLogClamp = 1e-12;

/// Mean over the batch of -log(max(probs[m, label_m], 1e-12)).
/// Throws ShapeError naming the sample when a label is out of range.
template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& probs, const std::vector<std::size_t>& labels);

struct LossBreakdown {
  double loss_T = 0.0;
  double loss_I = 0.0;
  double loss_H = 0.0;
  double gamma = 0.0;
  double total = 0.0;
};

/// Throws ConfigError for gamma outside [0, 1]. Returns a warning for
/// gamma in (0.5, 1], the range beyond the studied sweep.
std::optional<std::string> check_gamma(double gamma);

/// (1 - gamma) * loss_H + gamma * (loss_T + loss_I).
LossBreakdown combined_loss(double loss_T, double loss_H, double loss_I, double gamma);

template <typename T>
struct CombinedLoss {
  Tensor<T> total;
  LossBreakdown breakdown;
};

/// Graph form. A missing branch loss (unimodal variants) contributes 0.
/// With gamma == 0 the unimodal terms are left out of the graph, so their
/// classifiers receive exactly zero gradient.
template <typename T>
CombinedLoss<T> combined_loss(Graph<T>& g, const std::optional<Tensor<T>>& loss_T,
                              const std::optional<Tensor<T>>& loss_H,
                              const std::optional<Tensor<T>>& loss_I, double gamma);

struct VoteWeights {
  std::array<double, 3> w{};  // text, interaction, image
  VoteStrategy strategy = VoteStrategy::confidence;
};

template <typename T>
struct VoteResult {
  Tensor<T> fused;  // [B x n_cls]
  VoteWeights weights;
};

/// Convex combination of the three branch distributions. `learned_scalars`
/// ([3], required for the learned strategy) are squared and normalized;
/// gradients flow into them and into the branch probabilities.
template <typename T>
VoteResult<T> weighted_vote(Graph<T>& g, const std::array<BranchPrediction<T>, 3>& preds,
                            VoteStrategy strategy, const Tensor<T>* learned_scalars = nullptr);

/// Lowest index among maximal entries of each row.
std::vector<std::size_t> argmax_rows(std::span<const double> probs, std::size_t n_classes);

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct MetricsReport {
  std::size_t n_samples = 0;
  std::size_t n_classes = 0;
  double accuracy = 0.0;
  std::vector<double> precision;  // per class
  std::vector<double> recall;
  std::vector<bool> absent;       // class neither predicted nor present
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;          // harmonic mean of the two macro values
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::vector<PrPoint>> pr_curves;      // per class, threshold descending
};

/// probs is [n x n_classes] row-major.
MetricsReport compute_metrics(std::span<const double> probs, const std::vector<std::size_t>& labels,
                              std::size_t n_classes);

std::string metrics_to_json(const MetricsReport& m);
void write_metrics_json(const MetricsReport& m, const std::filesystem::path& path);
/// Columns: class, threshold, precision, recall.
void write_pr_curve_csv(const MetricsReport& m, const std::filesystem::path& path);

}  // namespace mcfnet
