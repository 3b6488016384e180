#include "mcfnet/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mcfnet {

using nlohmann::json;

namespace {

// Reads fields out of JSON objects, recording problems instead of throwing.
class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  // Returns the object at `key` (or nullptr when absent or not an object).
  const json* object(const json& parent, const std::string& key, const std::string& path) {
    auto it = parent.find(key);
    if (it == parent.end()) return nullptr;
    if (!it->is_object()) {
      errors_.push_back(path + key + " must be an object");
      return nullptr;
    }
    return &*it;
  }

  void allow(const json& obj, std::initializer_list<const char*> keys, const std::string& path) {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (!ok.count(it.key())) errors_.push_back(path + it.key() + " is not a known field");
    }
  }

  template <typename T>
  bool get(const json& obj, const char* key, T& dst, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end()) return false;
    if (!type_ok<T>(*it)) {
      errors_.push_back(path + key + " has the wrong type (" + it->type_name() + ")");
      return false;
    }
    dst = it->get<T>();
    return true;
  }

  template <typename E>
  void get_enum(const json& obj, const char* key, E& dst, E (*parse)(const std::string&),
                const std::string& path) {
    std::string name;
    if (!get(obj, key, name, path)) return;
    try {
      dst = parse(name);
    } catch (const ConfigError& e) {
      errors_.push_back(path + key + ": " + e.what());
    }
  }

 private:
  template <typename T>
  static bool type_ok(const json& v) {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else if constexpr (std::is_integral_v<T>) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!e.is_number()) return false;
      return true;
    } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!e.is_number_unsigned()) return false;
      return true;
    }
    return false;
  }

  std::vector<std::string>& errors_;
};

void read_encoder(Reader& r, const json& j, EncoderConfig& e, const std::string& path) {
  r.allow(j, {"d_model", "n_heads", "n_layers", "ffn_width", "embedding_dim", "share_layers", "max_len"},
          path);
  r.get(j, "d_model", e.d_model, path);
  r.get(j, "n_heads", e.n_heads, path);
  r.get(j, "n_layers", e.n_layers, path);
  r.get(j, "ffn_width", e.ffn_width, path);
  r.get(j, "embedding_dim", e.embedding_dim, path);
  r.get(j, "share_layers", e.share_layers, path);
  r.get(j, "max_len", e.max_len, path);
}

json encoder_json(const EncoderConfig& e) {
  return {{"d_model", e.d_model},     {"n_heads", e.n_heads},
          {"n_layers", e.n_layers},   {"ffn_width", e.ffn_width},
          {"embedding_dim", e.embedding_dim}, {"share_layers", e.share_layers},
          {"max_len", e.max_len}};
}

}  // namespace

std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg;
  for (const auto& e : errors) msg += (msg.empty() ? "" : "; ") + e;
  return msg;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> errs;
  for (const auto& e : model.validate()) errs.push_back("model." + e);
  if (trainer.batch_size == 0) errs.push_back("trainer.batch_size must be positive");
  const auto& o = trainer.optimizer;
  for (auto [name, v] : {std::pair{"lr_text_encoder", o.lr_text_encoder},
                         std::pair{"lr_image_encoder", o.lr_image_encoder},
                         std::pair{"lr_other", o.lr_other},
                         std::pair{"weight_decay", o.weight_decay}}) {
    if (!(v >= 0.0)) errs.push_back(std::string("trainer.") + name + " must be >= 0");
  }
  if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) errs.push_back("trainer.beta1 must lie in [0, 1)");
  if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) errs.push_back("trainer.beta2 must lie in [0, 1)");
  if (!(o.eps > 0.0)) errs.push_back("trainer.eps must be positive");
  if (!data.dataset) {
    for (const auto& e : effective_spec().validate()) errs.push_back("data." + e);
  }
  if (gamma_grid.empty()) errs.push_back("gamma_grid must not be empty");
  for (double g : gamma_grid) {
    if (!(g >= 0.0 && g <= 0.5)) {
      errs.push_back("gamma_grid value " + std::to_string(g) + " lies outside [0, 0.5]");
    }
  }
  if (bench.repeats < 10) {
    errs.push_back("bench.repeats must be >= 10 (got " + std::to_string(bench.repeats) + ")");
  }
  if (bench.batch_size == 0) errs.push_back("bench.batch_size must be positive");
  if (bench.text_length < 3) errs.push_back("bench.text_length must be >= 3");
  return errs;
}

void RunConfig::apply_data_shape(const SyntheticSpec& spec, std::size_t vocab_size) {
  model.geometry = {spec.image_size, spec.channels, spec.patch_size};
  model.vocab_size = vocab_size;
  model.decision.n_classes = spec.n_classes;
}

SyntheticSpec RunConfig::effective_spec() const {
  SyntheticSpec s = data.synthetic;
  if (!data.synthetic_seed_given) s.seed = seed;
  return s;
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["out"] = out.string();
  if (data.dataset) {
    j["data"] = {{"dataset", data.dataset->string()}};
  } else {
    j["data"] = {{"synthetic", nlohmann::ordered_json::parse(effective_spec().to_json())}};
  }
  const auto& f = model.fusion;
  j["model"] = {
      {"variant", to_string(model.variant)},
      {"text_encoder", encoder_json(model.text)},
      {"image_encoder", encoder_json(model.image)},
      {"fusion",
       {{"d_f", f.d_f}, {"heads", f.heads}, {"ffn_width", f.ffn_width}, {"p", f.reg.p},
        {"alpha", f.reg.alpha}, {"beta", f.reg.beta}, {"mode", to_string(f.mode)},
        {"topology", to_string(f.topology)}, {"use_ham", f.use_ham}, {"use_rm", f.use_rm}}},
      {"decision", {{"gamma", model.decision.gamma}, {"vote", to_string(model.decision.vote)}}}};
  const auto& o = trainer.optimizer;
  j["trainer"] = {{"epochs", trainer.epochs},          {"batch_size", trainer.batch_size},
                  {"lr_text_encoder", o.lr_text_encoder}, {"lr_image_encoder", o.lr_image_encoder},
                  {"lr_other", o.lr_other},            {"weight_decay", o.weight_decay},
                  {"beta1", o.beta1},                  {"beta2", o.beta2},
                  {"eps", o.eps}};
  j["gamma_grid"] = gamma_grid;
  j["ablation_seeds"] = ablation_seeds;
  j["bench"] = {{"repeats", bench.repeats},
                {"batch_size", bench.batch_size},
                {"text_length", bench.text_length}};
  return j.dump(2);
}

RunConfig parse_run_config(const std::string& text, const std::string& overrides) {
  json j = json::object();
  try {
    if (!text.empty()) j = json::parse(text);
    if (!overrides.empty()) j.merge_patch(json::parse(overrides));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");

  RunConfig c;
  std::vector<std::string> errs;
  Reader r(errs);
  r.allow(j, {"seed", "out", "data", "model", "trainer", "gamma_grid", "ablation_seeds", "bench"}, "");
  r.get(j, "seed", c.seed, "");
  std::string out;
  if (r.get(j, "out", out, "")) c.out = out;
  r.get(j, "gamma_grid", c.gamma_grid, "");
  r.get(j, "ablation_seeds", c.ablation_seeds, "");

  if (const json* d = r.object(j, "data", "")) {
    r.allow(*d, {"dataset", "synthetic"}, "data.");
    std::string path;
    if (r.get(*d, "dataset", path, "data.")) c.data.dataset = path;
    if (d->contains("dataset") && d->contains("synthetic")) {
      errs.push_back("data.dataset and data.synthetic are mutually exclusive");
    }
    if (const json* s = r.object(*d, "synthetic", "data.")) {
      c.data.synthetic_seed_given = s->contains("seed");
      try {
        c.data.synthetic = SyntheticSpec::from_json(s->dump());
      } catch (const std::exception& e) {
        errs.push_back(std::string("data.synthetic: ") + e.what());
      }
    }
  }

  if (const json* m = r.object(j, "model", "")) {
    r.allow(*m, {"variant", "text_encoder", "image_encoder", "fusion", "decision"}, "model.");
    r.get_enum(*m, "variant", c.model.variant, variant_from_string, "model.");
    if (const json* e = r.object(*m, "text_encoder", "model.")) {
      read_encoder(r, *e, c.model.text, "model.text_encoder.");
    }
    if (const json* e = r.object(*m, "image_encoder", "model.")) {
      read_encoder(r, *e, c.model.image, "model.image_encoder.");
    }
    if (const json* f = r.object(*m, "fusion", "model.")) {
      const std::string p = "model.fusion.";
      auto& fc = c.model.fusion;
      r.allow(*f, {"d_f", "heads", "ffn_width", "p", "alpha", "beta", "mode", "topology", "use_ham",
                   "use_rm"},
              p);
      r.get(*f, "d_f", fc.d_f, p);
      r.get(*f, "heads", fc.heads, p);
      r.get(*f, "ffn_width", fc.ffn_width, p);
      r.get(*f, "p", fc.reg.p, p);
      r.get(*f, "alpha", fc.reg.alpha, p);
      r.get(*f, "beta", fc.reg.beta, p);
      r.get_enum(*f, "mode", fc.mode, cross_attention_mode_from_string, p);
      r.get_enum(*f, "topology", fc.topology, topology_from_string, p);
      r.get(*f, "use_ham", fc.use_ham, p);
      r.get(*f, "use_rm", fc.use_rm, p);
    }
    if (const json* d = r.object(*m, "decision", "model.")) {
      r.allow(*d, {"gamma", "vote"}, "model.decision.");
      r.get(*d, "gamma", c.model.decision.gamma, "model.decision.");
      r.get_enum(*d, "vote", c.model.decision.vote, vote_strategy_from_string, "model.decision.");
    }
  }

  if (const json* t = r.object(j, "trainer", "")) {
    const std::string p = "trainer.";
    auto& o = c.trainer.optimizer;
    r.allow(*t, {"epochs", "batch_size", "lr_text_encoder", "lr_image_encoder", "lr_other",
                 "weight_decay", "beta1", "beta2", "eps"},
            p);
    r.get(*t, "epochs", c.trainer.epochs, p);
    r.get(*t, "batch_size", c.trainer.batch_size, p);
    r.get(*t, "lr_text_encoder", o.lr_text_encoder, p);
    r.get(*t, "lr_image_encoder", o.lr_image_encoder, p);
    r.get(*t, "lr_other", o.lr_other, p);
    r.get(*t, "weight_decay", o.weight_decay, p);
    r.get(*t, "beta1", o.beta1, p);
    r.get(*t, "beta2", o.beta2, p);
    r.get(*t, "eps", o.eps, p);
  }

  if (const json* b = r.object(j, "bench", "")) {
    r.allow(*b, {"repeats", "batch_size", "text_length"}, "bench.");
    r.get(*b, "repeats", c.bench.repeats, "bench.");
    r.get(*b, "batch_size", c.bench.batch_size, "bench.");
    r.get(*b, "text_length", c.bench.text_length, "bench.");
  }

  // Shape-dependent checks need the data geometry. A synthetic source
  // provides it without generating anything; a dataset directory is checked
  // again once loaded.
  if (!c.data.dataset) {
    const auto spec = c.effective_spec();
    c.apply_data_shape(spec, spec.vocab_size);
  }
  for (auto& e : c.validate()) errs.push_back(std::move(e));
  if (!errs.empty()) throw ConfigError(join_errors(errs));
  return c;
}

}  // namespace mcfnet
