#include "mcfnet/decision.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace mcfnet {

std::string to_string(Branch branch) {
  switch (branch) {
    case Branch::text: return "text";
    case Branch::interaction: return "interaction";
    case Branch::image: return "image";
  }
  return "?";
}

std::string to_string(VoteStrategy strategy) {
  switch (strategy) {
    case VoteStrategy::confidence: return "confidence";
    case VoteStrategy::learned: return "learned";
    case VoteStrategy::uniform: return "uniform";
  }
  return "?";
}

VoteStrategy vote_strategy_from_string(const std::string& s) {
  if (s == "confidence") return VoteStrategy::confidence;
  if (s == "learned") return VoteStrategy::learned;
  if (s == "uniform") return VoteStrategy::uniform;
  throw ConfigError("unknown vote strategy '" + s + "' (expected confidence, learned or uniform)");
}

// ---------------------------------------------------------------------------
// Classifier and loss

template <typename T>
BranchClassifier<T>::BranchClassifier(std::size_t d_f, std::size_t n_classes, Branch branch,
                                      std::mt19937_64& rng)
    : branch_(branch) {
  if (n_classes < 2) throw ConfigError("classifier needs at least 2 classes");
  w_ = trunc_normal_param<T>({d_f, n_classes}, 0.02, rng);
  b_ = constant_param<T>({n_classes}, T(0));
}

template <typename T>
BranchPrediction<T> BranchClassifier<T>::forward(Graph<T>& g, const Tensor<T>& x) const {
  if (x.rank() != 2 || x.dim(1) != w_.dim(0)) {
    throw ShapeError(to_string(branch_) + " classifier expects [B x " +
                     std::to_string(w_.dim(0)) + "], got " + shape_str(x.shape()));
  }
  auto logits = ops::linear(g, x, w_, b_);
  return {logits, ops::softmax(g, logits, 1), branch_};
}

template <typename T>
void BranchClassifier<T>::collect(ParamList<T>& out) const {
  const std::string prefix = "classifier." + to_string(branch_);
  out.push_back({prefix + ".w", w_, ParamGroup::other});
  out.push_back({prefix + ".b", b_, ParamGroup::other});
}

template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& probs,
                        const std::vector<std::size_t>& labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("cross entropy: probs " + shape_str(probs.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = probs.dim(0), K = probs.dim(1);
  for (std::size_t m = 0; m < B; ++m) {
    if (labels[m] >= K) {
      throw ShapeError("label " + std::to_string(labels[m]) + " of sample " + std::to_string(m) +
                       " is out of range for " + std::to_string(K) + " classes");
    }
  }
  const T clamp = static_cast<T>(kLogClamp);
  T total = 0;
  for (std::size_t m = 0; m < B; ++m) total -= std::log(std::max(probs[m * K + labels[m]], clamp));
  auto out = Tensor<T>::scalar(total / static_cast<T>(B));
  if (g.needs_grad({&probs})) {
    g.record("cross_entropy", {probs}, out, [probs, out, labels, B, K, clamp]() {
      const T go = out.grad()[0] / static_cast<T>(B);
      auto gp = probs.grad_mut();
      for (std::size_t m = 0; m < B; ++m) {
        const T p = probs[m * K + labels[m]];
        if (p > clamp) gp[m * K + labels[m]] -= go / p;
      }
    });
  }
  return out;
}

std::optional<std::string> check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw ConfigError("gamma = " + std::to_string(gamma) + " must lie in [0, 1]");
  }
  if (gamma > 0.5) {
    return "gamma = " + std::to_string(gamma) + " is outside the studied range [0, 0.5]";
  }
  return std::nullopt;
}

LossBreakdown combined_loss(double loss_T, double loss_H, double loss_I, double gamma) {
  check_gamma(gamma);
  LossBreakdown b{loss_T, loss_I, loss_H, gamma, 0.0};
  b.total = (1.0 - gamma) * loss_H + gamma * (loss_T + loss_I);
  return b;
}

template <typename T>
CombinedLoss<T> combined_loss(Graph<T>& g, const std::optional<Tensor<T>>& loss_T,
                              const std::optional<Tensor<T>>& loss_H,
                              const std::optional<Tensor<T>>& loss_I, double gamma) {
  check_gamma(gamma);
  auto value = [](const std::optional<Tensor<T>>& t) {
    return t ? static_cast<double>(t->item()) : 0.0;
  };
  CombinedLoss<T> out;
  out.breakdown = combined_loss(value(loss_T), value(loss_H), value(loss_I), gamma);

  std::vector<Tensor<T>> terms;
  if (loss_H && gamma < 1.0) terms.push_back(ops::scale(g, *loss_H, static_cast<T>(1.0 - gamma)));
  if (gamma > 0.0) {
    if (loss_T) terms.push_back(ops::scale(g, *loss_T, static_cast<T>(gamma)));
    if (loss_I) terms.push_back(ops::scale(g, *loss_I, static_cast<T>(gamma)));
  }
  if (terms.empty()) {
    out.total = Tensor<T>::scalar(T(0));
    return out;
  }
  out.total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) out.total = ops::add(g, out.total, terms[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Voting

namespace {

// fused = sum_b w_b P_b with w_b = s_b^2 / sum s^2.
template <typename T>
Tensor<T> learned_vote(Graph<T>& g, const Tensor<T>& s, const std::array<Tensor<T>, 3>& p,
                       std::array<double, 3>& w_out) {
  T norm = 0;
  for (std::size_t b = 0; b < 3; ++b) norm += s[b] * s[b];
  if (!(norm > T(0)) || !std::isfinite(norm)) {
    throw NumericError("learned vote scalars have zero or non-finite norm");
  }
  std::array<T, 3> w{};
  for (std::size_t b = 0; b < 3; ++b) {
    w[b] = s[b] * s[b] / norm;
    w_out[b] = static_cast<double>(w[b]);
  }
  Tensor<T> out(p[0].shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = w[0] * p[0][i] + w[1] * p[1][i] + w[2] * p[2][i];
  if (g.needs_grad({&s, &p[0], &p[1], &p[2]})) {
    g.record("learned_vote", {s, p[0], p[1], p[2]}, out, [s, p, out, w, norm]() {
      const auto go = out.grad();
      std::array<T, 3> gw{};
      for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t i = 0; i < go.size(); ++i) gw[b] += go[i] * p[b][i];
        if (p[b].requires_grad()) {
          auto gp = p[b].grad_mut();
          for (std::size_t i = 0; i < go.size(); ++i) gp[i] += w[b] * go[i];
        }
      }
      if (s.requires_grad()) {
        const T avg = w[0] * gw[0] + w[1] * gw[1] + w[2] * gw[2];
        auto gs = s.grad_mut();
        for (std::size_t c = 0; c < 3; ++c) gs[c] += T(2) * s[c] / norm * (gw[c] - avg);
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
VoteResult<T> weighted_vote(Graph<T>& g, const std::array<BranchPrediction<T>, 3>& preds,
                            VoteStrategy strategy, const Tensor<T>* learned_scalars) {
  const Shape& shape = preds[0].probs.shape();
  for (const auto& p : preds) {
    if (p.probs.shape() != shape || shape.size() != 2) {
      throw ShapeError("vote: branch distributions have mismatched shapes " + shape_str(shape) +
                       " and " + shape_str(p.probs.shape()));
    }
  }
  VoteResult<T> r;
  r.weights.strategy = strategy;
  std::array<Tensor<T>, 3> probs{preds[0].probs, preds[1].probs, preds[2].probs};
  if (strategy == VoteStrategy::learned) {
    if (!learned_scalars || learned_scalars->numel() != 3) {
      throw ConfigError("learned vote needs three trainable scalars");
    }
    r.fused = learned_vote(g, *learned_scalars, probs, r.weights.w);
    return r;
  }
  const std::size_t B = shape[0], K = shape[1];
  if (strategy == VoteStrategy::uniform) {
    r.weights.w = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  } else {
    // Batch mean of each branch's top probability, normalized.
    double total = 0.0;
    for (std::size_t b = 0; b < 3; ++b) {
      double conf = 0.0;
      for (std::size_t m = 0; m < B; ++m) {
        conf += static_cast<double>(
            *std::max_element(probs[b].data().begin() + m * K, probs[b].data().begin() + (m + 1) * K));
      }
      r.weights.w[b] = conf / static_cast<double>(B);
      total += r.weights.w[b];
    }
    for (auto& w : r.weights.w) w /= total;
  }
  // Weights are treated as constants.
  r.fused = ops::scale(g, probs[0], static_cast<T>(r.weights.w[0]));
  for (std::size_t b = 1; b < 3; ++b) {
    r.fused = ops::add(g, r.fused, ops::scale(g, probs[b], static_cast<T>(r.weights.w[b])));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

std::vector<std::size_t> argmax_rows(std::span<const double> probs, std::size_t n_classes) {
  std::vector<std::size_t> out(probs.size() / n_classes);
  for (std::size_t m = 0; m < out.size(); ++m) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n_classes; ++c) {
      if (probs[m * n_classes + c] > probs[m * n_classes + best]) best = c;
    }
    out[m] = best;
  }
  return out;
}

MetricsReport compute_metrics(std::span<const double> probs, const std::vector<std::size_t>& labels,
                              std::size_t n_classes) {
  if (labels.empty()) throw ShapeError("metrics need a non-empty evaluation set");
  if (n_classes == 0 || probs.size() != labels.size() * n_classes) {
    throw ShapeError("metrics: " + std::to_string(probs.size()) + " probabilities for " +
                     std::to_string(labels.size()) + " samples and " + std::to_string(n_classes) +
                     " classes");
  }
  for (std::size_t m = 0; m < labels.size(); ++m) {
    if (labels[m] >= n_classes) {
      throw ShapeError("label " + std::to_string(labels[m]) + " of sample " + std::to_string(m) +
                       " is out of range");
    }
  }
  const std::size_t K = n_classes, M = labels.size();
  MetricsReport r;
  r.n_samples = M;
  r.n_classes = K;
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  const auto pred = argmax_rows(probs, K);
  for (std::size_t m = 0; m < M; ++m) ++r.confusion[labels[m]][pred[m]];

  std::size_t correct = 0;
  for (std::size_t c = 0; c < K; ++c) correct += r.confusion[c][c];
  r.accuracy = static_cast<double>(correct) / static_cast<double>(M);

  r.precision.assign(K, 0.0);
  r.recall.assign(K, 0.0);
  r.absent.assign(K, false);
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t k = 0; k < K; ++k) {
      predicted += r.confusion[k][c];
      actual += r.confusion[c][k];
    }
    const double tp = static_cast<double>(r.confusion[c][c]);
    if (predicted > 0) r.precision[c] = tp / static_cast<double>(predicted);
    if (actual > 0) r.recall[c] = tp / static_cast<double>(actual);
    r.absent[c] = predicted == 0 && actual == 0;
  }
  for (std::size_t c = 0; c < K; ++c) {
    r.macro_precision += r.precision[c] / static_cast<double>(K);
    r.macro_recall += r.recall[c] / static_cast<double>(K);
  }
  const double pr = r.macro_precision + r.macro_recall;
  r.macro_f1 = pr > 0.0 ? 2.0 * r.macro_precision * r.macro_recall / pr : 0.0;

  // PR curves: predict positive when score >= threshold, thresholds over
  // the distinct scores from high to low.
  r.pr_curves.resize(K);
  std::vector<std::size_t> order(M);
  for (std::size_t c = 0; c < K; ++c) {
    for (std::size_t m = 0; m < M; ++m) order[m] = m;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return probs[a * K + c] > probs[b * K + c];
    });
    std::size_t positives = 0;
    for (auto l : labels) positives += l == c;
    std::size_t tp = 0, taken = 0;
    for (std::size_t i = 0; i < M;) {
      const double t = probs[order[i] * K + c];
      while (i < M && probs[order[i] * K + c] == t) {
        tp += labels[order[i]] == c;
        ++taken;
        ++i;
      }
      r.pr_curves[c].push_back(
          {t, static_cast<double>(tp) / static_cast<double>(taken),
           positives ? static_cast<double>(tp) / static_cast<double>(positives) : 0.0});
    }
  }
  return r;
}

std::string metrics_to_json(const MetricsReport& m) {
  nlohmann::ordered_json j;
  j["n_samples"] = m.n_samples;
  j["n_classes"] = m.n_classes;
  j["accuracy"] = m.accuracy;
  j["macro_precision"] = m.macro_precision;
  j["macro_recall"] = m.macro_recall;
  j["macro_f1"] = m.macro_f1;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  std::vector<std::size_t> absent;
  for (std::size_t c = 0; c < m.absent.size(); ++c)
    if (m.absent[c]) absent.push_back(c);
  j["absent_classes"] = absent;
  j["confusion"] = m.confusion;
  return j.dump(2);
}

void write_metrics_json(const MetricsReport& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << metrics_to_json(m) << '\n';
}

void write_pr_curve_csv(const MetricsReport& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "class,threshold,precision,recall\n";
  out.precision(17);
  for (std::size_t c = 0; c < m.pr_curves.size(); ++c) {
    for (const auto& p : m.pr_curves[c]) {
      out << c << ',' << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
    }
  }
}

#define MCFNET_INSTANTIATE_DECISION(T)                                                        \
  template class BranchClassifier<T>;                                                         \
  template Tensor<T> cross_entropy<T>(Graph<T>&, const Tensor<T>&,                            \
                                      const std::vector<std::size_t>&);                       \
  template CombinedLoss<T> combined_loss<T>(Graph<T>&, const std::optional<Tensor<T>>&,       \
                                            const std::optional<Tensor<T>>&,                  \
                                            const std::optional<Tensor<T>>&, double);         \
  template VoteResult<T> weighted_vote<T>(Graph<T>&, const std::array<BranchPrediction<T>, 3>&, \
                                          VoteStrategy, const Tensor<T>*);

MCFNET_INSTANTIATE_DECISION(float)
MCFNET_INSTANTIATE_DECISION(double)

#undef MCFNET_INSTANTIATE_DECISION

}  // namespace mcfnet
