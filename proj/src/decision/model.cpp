#include "mcfnet/model.hpp"

#include <algorithm>
#include <cmath>

namespace mcfnet {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw IoError("unknown split '" + s + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::image_only: return "image_only";
    case Variant::text_only: return "text_only";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "image_only") return Variant::image_only;
  if (s == "text_only") return Variant::text_only;
  throw ConfigError("unknown model variant '" + s + "' (expected full, image_only or text_only)");
}

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> errs;
  auto append = [&](const std::vector<std::string>& more) {
    errs.insert(errs.end(), more.begin(), more.end());
  };
  append(text.validate("text_encoder."));
  append(image.validate("image_encoder."));
  append(geometry.validate("image."));
  if (text.max_len < 3) errs.push_back("text_encoder.max_len must be >= 3 for the conv windows");
  if (variant == Variant::full && text.d_model != image.d_model) {
    errs.push_back("text_encoder.d_model " + std::to_string(text.d_model) +
                   " must equal image_encoder.d_model " + std::to_string(image.d_model));
  }
  append(fusion.validate("fusion.", variant == Variant::image_only ? image.d_model : text.d_model));
  if (vocab_size < 2) errs.push_back("vocab_size must be >= 2 (PAD and UNK)");
  if (decision.n_classes < 2) errs.push_back("decision.n_classes must be >= 2");
  try {
    check_gamma(decision.gamma);
  } catch (const ConfigError& e) {
    errs.push_back(std::string("decision.") + e.what());
  }
  return errs;
}

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                 const ModelConfig& config) {
  Batch b;
  std::vector<std::vector<std::size_t>> tokens;
  const auto& geo = config.geometry;
  const std::size_t img = geo.image_size * geo.image_size * geo.channels;
  b.image = {indices.size(), geo.image_size, geo.image_size, geo.channels, geo.patch_size, {}};
  b.image.pixels.reserve(indices.size() * img);
  for (auto i : indices) {
    const Sample& s = samples.at(i);
    if (s.image.size() != img) {
      throw ShapeError("sample " + std::to_string(i) + " image holds " +
                       std::to_string(s.image.size()) + " values, expected " + std::to_string(img));
    }
    b.image.pixels.insert(b.image.pixels.end(), s.image.begin(), s.image.end());
    tokens.push_back(s.tokens);
    b.labels.push_back(s.label);
  }
  b.text = make_text_batch(tokens, config.vocab_size, 3);
  return b;
}

// ---------------------------------------------------------------------------
// MCFNet

template <typename T>
MCFNet<T>::MCFNet(const ModelConfig& config, std::mt19937_64& rng) : config_(config) {
  const auto errs = config.validate();
  if (!errs.empty()) {
    std::string msg;
    for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
    throw ConfigError(msg);
  }
  const std::size_t K = config.decision.n_classes, df = config.fusion.d_f;
  switch (config.variant) {
    case Variant::full:
      text_encoder_.emplace(config.text, config.vocab_size, rng);
      image_encoder_.emplace(config.image, config.geometry, rng);
      fusion_.emplace(config.text.d_model, config.fusion, rng);
      text_cls_.emplace(df, K, Branch::text, rng);
      hybrid_cls_.emplace(df, K, Branch::interaction, rng);
      image_cls_.emplace(df, K, Branch::image, rng);
      if (config.decision.vote == VoteStrategy::learned) {
        vote_scalars_ = constant_param<T>({3}, T(1));
      }
      break;
    case Variant::text_only:
      text_encoder_.emplace(config.text, config.vocab_size, rng);
      unimodal_head_.emplace(config.text.d_model, df, rng);
      text_cls_.emplace(df, K, Branch::text, rng);
      break;
    case Variant::image_only:
      image_encoder_.emplace(config.image, config.geometry, rng);
      unimodal_head_.emplace(config.image.d_model, df, rng);
      image_cls_.emplace(df, K, Branch::image, rng);
      break;
  }
}

template <typename T>
ModelOutput<T> MCFNet<T>::forward(Graph<T>& g, const Batch& batch, RunMode mode,
                                  std::mt19937_64& rng) const {
  ModelOutput<T> out;
  const auto& fc = config_.fusion;
  if (config_.variant == Variant::full) {
    auto t = text_encoder_->forward(g, batch.text);
    auto i = image_encoder_->forward(g, batch.image);
    auto f = fusion_->forward(g, t, i, mode, rng);
    out.text = text_cls_->forward(g, f.o_text);
    out.hybrid = hybrid_cls_->forward(g, f.o_hybrid);
    out.image = image_cls_->forward(g, f.o_image);
    std::array<BranchPrediction<T>, 3> preds{*out.text, *out.hybrid, *out.image};
    if (config_.decision.vote == VoteStrategy::learned) {
      // The vote is trained on its own; branch outputs enter as constants.
      for (auto& p : preds) p.probs = p.probs.detach();
    }
    auto v = weighted_vote(g, preds, config_.decision.vote, &vote_scalars_);
    out.fused = v.fused;
    out.vote = v.weights;
    return out;
  }

  // Unimodal: global embedding -> two channels -> head -> classifier.
  const bool text = config_.variant == Variant::text_only;
  auto enc = text ? text_encoder_->forward(g, batch.text) : image_encoder_->forward(g, batch.image);
  Tensor<T> ch1 = enc.global, ch2 = enc.global;
  if (fc.use_rm) {
    ch1 = dropout_channel(g, enc.global, fc.reg.p, mode, rng);
    ch2 = elastic_net_channel(g, enc.global, fc.reg.alpha, fc.reg.beta);
  }
  auto h = unimodal_head_->forward(g, ch1, ch2);
  auto& slot = text ? out.text : out.image;
  slot = (text ? *text_cls_ : *image_cls_).forward(g, h);
  out.fused = slot->probs;
  out.vote.w = text ? std::array<double, 3>{1.0, 0.0, 0.0} : std::array<double, 3>{0.0, 0.0, 1.0};
  out.vote.strategy = config_.decision.vote;
  return out;
}

template <typename T>
StepLoss<T> MCFNet<T>::loss(Graph<T>& g, const ModelOutput<T>& out,
                            const std::vector<std::size_t>& labels, double gamma) const {
  auto ce = [&](const std::optional<BranchPrediction<T>>& p) -> std::optional<Tensor<T>> {
    if (!p) return std::nullopt;
    return cross_entropy(g, p->probs, labels);
  };
  StepLoss<T> s;
  const double eff_gamma = config_.variant == Variant::full ? gamma : 1.0;
  auto c = combined_loss(g, ce(out.text), ce(out.hybrid), ce(out.image), eff_gamma);
  s.objective = c.total;
  s.breakdown = c.breakdown;
  if (config_.variant == Variant::full && config_.decision.vote == VoteStrategy::learned) {
    auto vl = cross_entropy(g, out.fused, labels);
    s.vote_loss = static_cast<double>(vl.item());
    s.objective = ops::add(g, s.objective, vl);
  }
  return s;
}

template <typename T>
ParamList<T> MCFNet<T>::parameters() const {
  ParamList<T> p;
  if (text_encoder_) text_encoder_->collect(p);
  if (image_encoder_) image_encoder_->collect(p);
  if (fusion_) fusion_->collect(p);
  if (unimodal_head_) {
    unimodal_head_->collect(p, config_.variant == Variant::text_only ? "fusion.text_head"
                                                                     : "fusion.image_head");
  }
  if (text_cls_) text_cls_->collect(p);
  if (hybrid_cls_) hybrid_cls_->collect(p);
  if (image_cls_) image_cls_->collect(p);
  if (vote_scalars_.numel() > 0) p.push_back({"vote.scalars", vote_scalars_, ParamGroup::other});
  return p;
}

// ---------------------------------------------------------------------------
// Training and prediction

template <typename T>
std::vector<LossBreakdown> train_epoch(const MCFNet<T>& model, const std::vector<Sample>& samples,
                                       std::vector<std::size_t> indices, AdamW<T>& optimizer,
                                       double gamma, std::size_t batch_size, std::mt19937_64& rng,
                                       std::size_t& global_step) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::shuffle(indices.begin(), indices.end(), rng);
  std::vector<LossBreakdown> history;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    auto batch = make_batch(samples, std::span(indices).subspan(start, end - start), model.config());
    optimizer.zero_grad();
    Graph<T> g;
    StepLoss<T> loss;
    try {
      auto out = model.forward(g, batch, RunMode::training, rng);
      loss = model.loss(g, out, batch.labels, gamma);
    } catch (const NumericError& e) {
      throw NumericError("numeric failure at step " + std::to_string(global_step) + ": " + e.what());
    }
    if (!std::isfinite(loss.breakdown.total) || !std::isfinite(static_cast<double>(loss.objective.item()))) {
      throw NumericError("non-finite loss at step " + std::to_string(global_step));
    }
    g.backward(loss.objective);
    optimizer.step();
    history.push_back(loss.breakdown);
    ++global_step;
  }
  return history;
}

LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& steps) {
  LossBreakdown m;
  if (steps.empty()) return m;
  for (const auto& s : steps) {
    m.loss_T += s.loss_T;
    m.loss_I += s.loss_I;
    m.loss_H += s.loss_H;
    m.total += s.total;
  }
  const double n = static_cast<double>(steps.size());
  m.loss_T /= n;
  m.loss_I /= n;
  m.loss_H /= n;
  m.total /= n;
  m.gamma = steps.front().gamma;
  return m;
}

template <typename T>
std::vector<double> predict(const MCFNet<T>& model, const std::vector<Sample>& samples,
                            const std::vector<std::size_t>& indices, std::size_t batch_size) {
  std::vector<double> probs;
  std::mt19937_64 unused(0);  // inference never draws
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::size_t end = std::min(indices.size(), start + batch_size);
    auto batch = make_batch(samples, std::span(indices).subspan(start, end - start), model.config());
    Graph<T> g(false);
    auto out = model.forward(g, batch, RunMode::inference, unused);
    for (auto v : out.fused.data()) probs.push_back(static_cast<double>(v));
  }
  return probs;
}

template class MCFNet<float>;
template class MCFNet<double>;
template std::vector<LossBreakdown> train_epoch<float>(const MCFNet<float>&,
                                                       const std::vector<Sample>&,
                                                       std::vector<std::size_t>, AdamW<float>&,
                                                       double, std::size_t, std::mt19937_64&,
                                                       std::size_t&);
template std::vector<LossBreakdown> train_epoch<double>(const MCFNet<double>&,
                                                        const std::vector<Sample>&,
                                                        std::vector<std::size_t>, AdamW<double>&,
                                                        double, std::size_t, std::mt19937_64&,
                                                        std::size_t&);
template std::vector<double> predict<float>(const MCFNet<float>&, const std::vector<Sample>&,
                                            const std::vector<std::size_t>&, std::size_t);
template std::vector<double> predict<double>(const MCFNet<double>&, const std::vector<Sample>&,
                                             const std::vector<std::size_t>&, std::size_t);

}  // namespace mcfnet
