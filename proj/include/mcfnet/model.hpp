#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mcfnet/decision.hpp"
#include "mcfnet/encoders.hpp"
#include "mcfnet/fusion.hpp"
#include "mcfnet/optimizer.hpp"
#include "mcfnet/sample.hpp"

namespace mcfnet {

/// full: both encoders, three branches and the vote. image_only/text_only:
/// one encoder, its regularization channels and unimodal head, one classifier.
enum class Variant { full, image_only, text_only };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct DecisionConfig {
  double gamma = 0.1;
  VoteStrategy vote = VoteStrategy::confidence;
  std::size_t n_classes = 8;
};

struct ModelConfig {
  EncoderConfig text;
  EncoderConfig image = [] {
    EncoderConfig c;
    c.share_layers = false;
    return c;
  }();
  ImageGeometry geometry;
  std::size_t vocab_size = 64;
  FusionConfig fusion;
  DecisionConfig decision;
  Variant variant = Variant::full;

  /// Every problem found, each prefixed with its field path.
  std::vector<std::string> validate() const;
};

struct Batch {
  TextBatch text;
  ImageBatch image;
  std::vector<std::size_t> labels;
};

/// Gathers samples[indices] into padded tensors (text padded to >= 3).
Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                 const ModelConfig& config);

template <typename T>
struct ModelOutput {
  std::optional<BranchPrediction<T>> text, hybrid, image;
  Tensor<T> fused;  // final class distribution [B x n_cls]
  VoteWeights vote;
};

template <typename T>
struct StepLoss {
  Tensor<T> objective;       // what backward runs on
  LossBreakdown breakdown;   // the combined-loss terms
  double vote_loss = 0.0;    // learned-vote cross entropy (0 otherwise)
};

template <typename T>
class MCFNet {
 public:
  MCFNet(const ModelConfig& config, std::mt19937_64& rng);

  ModelOutput<T> forward(Graph<T>& g, const Batch& batch, RunMode mode,
                         std::mt19937_64& rng) const;

  /// Combined loss at `gamma` (unimodal variants use gamma = 1 over their
  /// single branch). With the learned vote, the cross entropy of the fused
  /// distribution is added to the objective; it only reaches the vote scalars.
  StepLoss<T> loss(Graph<T>& g, const ModelOutput<T>& out, const std::vector<std::size_t>& labels,
                   double gamma) const;

  ParamList<T> parameters() const;
  const ModelConfig& config() const { return config_; }
  const FusionModule<T>* fusion() const { return fusion_ ? &*fusion_ : nullptr; }

 private:
  ModelConfig config_;
  std::optional<TextEncoder<T>> text_encoder_;
  std::optional<ImageEncoder<T>> image_encoder_;
  std::optional<FusionModule<T>> fusion_;
  std::optional<UnimodalFusion<T>> unimodal_head_;
  std::optional<BranchClassifier<T>> text_cls_, hybrid_cls_, image_cls_;
  Tensor<T> vote_scalars_;
};

struct TrainerConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  AdamWConfig optimizer;
};

/// One shuffled pass over samples[indices]: forward, loss, backward, AdamW
/// step, per batch. Returns the per-step breakdowns. Throws NumericError
/// naming the global step when the loss is not finite.
template <typename T>
std::vector<LossBreakdown> train_epoch(const MCFNet<T>& model, const std::vector<Sample>& samples,
                                       std::vector<std::size_t> indices, AdamW<T>& optimizer,
                                       double gamma, std::size_t batch_size, std::mt19937_64& rng,
                                       std::size_t& global_step);

/// Mean of a set of step breakdowns.
LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& steps);

/// Fused class distributions for samples[indices], in order, [n x n_cls].
template <typename T>
std::vector<double> predict(const MCFNet<T>& model, const std::vector<Sample>& samples,
                            const std::vector<std::size_t>& indices, std::size_t batch_size = 32);

}  // namespace mcfnet
