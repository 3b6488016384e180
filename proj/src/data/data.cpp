#include "mcfnet/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mcfnet {

static_assert(std::endian::native == std::endian::little,
              "images.bin is written as raw little-endian float32");

namespace {

constexpr std::size_t kShapes = 8;
constexpr std::size_t kColors = 8;
constexpr float kBackground = 0.1f;

constexpr std::array<std::array<float, 3>, kColors> kPalette{{
    {0.9f, 0.1f, 0.1f},   // red
    {0.1f, 0.8f, 0.2f},   // green
    {0.2f, 0.3f, 0.95f},  // blue
    {0.95f, 0.9f, 0.1f},  // yellow
    {0.85f, 0.2f, 0.85f}, // magenta
    {0.1f, 0.85f, 0.85f}, // cyan
    {0.95f, 0.95f, 0.95f},// white
    {0.95f, 0.55f, 0.1f}, // orange
}};

// Number of classes made ambiguous for a given informativeness. Rounds up so
// the ambiguous fraction never falls below 1 - informativeness; a lone
// ambiguous class gets a partner.
std::size_t ambiguous_count(double informativeness, std::size_t n) {
  auto k = static_cast<std::size_t>(std::ceil((1.0 - informativeness) * static_cast<double>(n) - 1e-9));
  if (k == 1) k = 2;
  return std::min(k, n);
}

// Assigns attribute ids so that classes in [first, first + count) share ids
// in groups of two (three for the last group when count is odd).
std::vector<std::size_t> grouped_ids(std::size_t n, std::size_t first, std::size_t count) {
  std::vector<std::size_t> group_of(n, std::numeric_limits<std::size_t>::max());
  const std::size_t groups = count / 2;
  for (std::size_t i = 0; i < count; ++i) group_of[first + i] = std::min(i / 2, groups - 1);
  std::vector<std::size_t> ids(n);
  std::map<std::size_t, std::size_t> group_id;
  std::size_t next = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (group_of[c] == std::numeric_limits<std::size_t>::max()) {
      ids[c] = next++;
    } else if (auto it = group_id.find(group_of[c]); it != group_id.end()) {
      ids[c] = it->second;
    } else {
      group_id[group_of[c]] = next;
      ids[c] = next++;
    }
  }
  return ids;
}

std::size_t distinct(const std::vector<ClassRule>& rules, bool keyword) {
  std::size_t n = 0;
  for (const auto& r : rules) n = std::max(n, (keyword ? r.keyword : r.pattern) + 1);
  return n;
}

bool inside_shape(std::size_t shape, float u, float v, float r) {
  const float au = std::abs(u), av = std::abs(v);
  const bool box = au <= r && av <= r;
  switch (shape) {
    case 0: return box;
    case 1: return u * u + v * v <= r * r;
    case 2: {
      const float d2 = u * u + v * v;
      return d2 <= r * r && d2 >= 0.25f * r * r;
    }
    case 3: return box && static_cast<int>(std::floor((v + r) / (r / 2))) % 2 == 0;
    case 4: return box && static_cast<int>(std::floor((u + r) / (r / 2))) % 2 == 0;
    case 5: return (au <= r / 3 && av <= r) || (av <= r / 3 && au <= r);
    case 6: return box && std::abs(au - av) <= r / 4;
    case 7: return v >= -r && v <= r && au <= (v + r) / 2;
  }
  return false;
}

std::size_t lowest_consistent(const std::vector<ClassRule>& rules, std::size_t pattern,
                              std::size_t keyword, bool use_pattern, bool use_keyword) {
  for (std::size_t c = 0; c < rules.size(); ++c) {
    if ((!use_pattern || rules[c].pattern == pattern) && (!use_keyword || rules[c].keyword == keyword)) {
      return c;
    }
  }
  return 0;
}

std::string keyword_word(std::size_t k) { return "keyword" + std::to_string(k); }
std::string filler_word(std::size_t k) { return "word" + std::to_string(k); }

// Keyword ids occupy vocabulary ids [2, 2 + n_keywords).
std::size_t keyword_of(const Sample& s, std::size_t n_keywords) {
  for (auto t : s.tokens) {
    if (t >= 2 && t < 2 + n_keywords) return t - 2;
  }
  return std::numeric_limits<std::size_t>::max();
}

std::size_t best_pattern(const Sample& s, const SyntheticSpec& spec,
                         const std::vector<ClassRule>& rules) {
  const std::size_t n_patterns = distinct(rules, false);
  std::size_t best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < n_patterns; ++p) {
    for (int dy = -kMaxShift; dy <= kMaxShift; ++dy) {
      for (int dx = -kMaxShift; dx <= kMaxShift; ++dx) {
        const auto tmpl = render_pattern(p, spec.image_size, spec.channels, dx, dy);
        double err = 0.0;
        for (std::size_t i = 0; i < tmpl.size() && err < best_err; ++i) {
          const double d = static_cast<double>(tmpl[i]) - s.image[i];
          err += d * d;
        }
        if (err < best_err) {
          best_err = err;
          best = p;
        }
      }
    }
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// Spec

std::vector<std::string> SyntheticSpec::validate() const {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back("spec." + msg);
  };
  need(n_classes >= 2, "n_classes must be >= 2");
  need(samples_per_class >= 1, "samples_per_class must be >= 1");
  need(image_size >= 16, "image_size must be >= 16 so patterns fit");
  need(channels >= 1, "channels must be >= 1");
  need(patch_size > 0 && image_size % std::max<std::size_t>(patch_size, 1) == 0,
       "patch_size " + std::to_string(patch_size) + " must divide image_size " +
           std::to_string(image_size));
  need(min_length >= 1, "min_length must be >= 1");
  need(max_length >= min_length, "max_length must be >= min_length");
  need(image_informativeness >= 0.0 && image_informativeness <= 1.0,
       "image_informativeness must lie in [0, 1]");
  need(text_informativeness >= 0.0 && text_informativeness <= 1.0,
       "text_informativeness must lie in [0, 1]");
  need(noise_level >= 0.0 && noise_level <= 1.0, "noise_level must lie in [0, 1]");
  if (errs.empty()) {
    const auto rules = class_rules(*this);
    const std::size_t keywords = distinct(rules, true), patterns = distinct(rules, false);
    need(vocab_size >= 2 + keywords + 1,
         "vocab_size " + std::to_string(vocab_size) + " is too small: " + std::to_string(keywords) +
             " keywords need at least " + std::to_string(keywords + 3) +
             " entries (PAD, UNK and one filler word)");
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (const auto& r : rules) pairs.insert({r.pattern, r.keyword});
    need(pairs.size() == rules.size(),
         "n_classes " + std::to_string(n_classes) +
             " is too small for the informativeness values: two classes would share both "
             "pattern and keyword");
    need(patterns <= kShapes * kColors, "too many distinct patterns (" + std::to_string(patterns) +
                                            " > " + std::to_string(kShapes * kColors) + ")");
  }
  return errs;
}

std::string SyntheticSpec::to_json() const {
  nlohmann::ordered_json j;
  j["n_classes"] = n_classes;
  j["samples_per_class"] = samples_per_class;
  j["image_size"] = image_size;
  j["channels"] = channels;
  j["patch_size"] = patch_size;
  j["vocab_size"] = vocab_size;
  j["min_length"] = min_length;
  j["max_length"] = max_length;
  j["image_informativeness"] = image_informativeness;
  j["text_informativeness"] = text_informativeness;
  j["noise_level"] = noise_level;
  j["seed"] = seed;
  return j.dump(2);
}

SyntheticSpec SyntheticSpec::from_json(const std::string& text) {
  SyntheticSpec s;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("synthetic spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("synthetic spec must be a JSON object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      if (k == "n_classes") s.n_classes = v.get<std::size_t>();
      else if (k == "samples_per_class") s.samples_per_class = v.get<std::size_t>();
      else if (k == "image_size") s.image_size = v.get<std::size_t>();
      else if (k == "channels") s.channels = v.get<std::size_t>();
      else if (k == "patch_size") s.patch_size = v.get<std::size_t>();
      else if (k == "vocab_size") s.vocab_size = v.get<std::size_t>();
      else if (k == "min_length") s.min_length = v.get<std::size_t>();
      else if (k == "max_length") s.max_length = v.get<std::size_t>();
      else if (k == "image_informativeness") s.image_informativeness = v.get<double>();
      else if (k == "text_informativeness") s.text_informativeness = v.get<double>();
      else if (k == "noise_level") s.noise_level = v.get<double>();
      else if (k == "seed") s.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown synthetic spec field '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec field has the wrong type: ") + e.what());
  }
  return s;
}

SyntheticSpec SyntheticSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read synthetic spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<ClassRule> class_rules(const SyntheticSpec& spec) {
  const std::size_t n = spec.n_classes;
  const std::size_t amb_img = ambiguous_count(spec.image_informativeness, n);
  const std::size_t amb_txt = ambiguous_count(spec.text_informativeness, n);
  const auto patterns = grouped_ids(n, 0, amb_img);
  const auto keywords = grouped_ids(n, n - amb_txt, amb_txt);
  std::vector<ClassRule> rules(n);
  for (std::size_t c = 0; c < n; ++c) rules[c] = {patterns[c], keywords[c]};
  return rules;
}

InformativenessReport self_check(const SyntheticSpec& spec) {
  const auto rules = class_rules(spec);
  const double n = static_cast<double>(rules.size());
  InformativenessReport r;
  for (std::size_t c = 0; c < rules.size(); ++c) {
    const auto& rc = rules[c];
    r.image_oracle_accuracy += lowest_consistent(rules, rc.pattern, rc.keyword, true, false) == c;
    r.text_oracle_accuracy += lowest_consistent(rules, rc.pattern, rc.keyword, false, true) == c;
    r.bimodal_oracle_accuracy += lowest_consistent(rules, rc.pattern, rc.keyword, true, true) == c;
    std::size_t same_p = 0, same_k = 0;
    for (const auto& o : rules) {
      same_p += o.pattern == rc.pattern;
      same_k += o.keyword == rc.keyword;
    }
    r.image_ambiguous_fraction += same_p > 1;
    r.text_ambiguous_fraction += same_k > 1;
  }
  r.image_oracle_accuracy /= n;
  r.text_oracle_accuracy /= n;
  r.bimodal_oracle_accuracy /= n;
  r.image_ambiguous_fraction /= n;
  r.text_ambiguous_fraction /= n;
  return r;
}

// ---------------------------------------------------------------------------
// Rendering and oracles

std::vector<float> render_pattern(std::size_t pattern, std::size_t side, std::size_t channels,
                                  int dx, int dy) {
  const std::size_t color = pattern % kColors, shape = (pattern / kColors) % kShapes;
  std::vector<float> img(side * side * channels, kBackground);
  const float r = static_cast<float>(side) / 4.0f;
  const float cx = static_cast<float>(side) / 2.0f + static_cast<float>(dx);
  const float cy = static_cast<float>(side) / 2.0f + static_cast<float>(dy);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const float u = static_cast<float>(x) + 0.5f - cx, v = static_cast<float>(y) + 0.5f - cy;
      if (!inside_shape(shape, u, v, r)) continue;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        img[(y * side + x) * channels + ch] =
            channels == 1 ? 0.25f + 0.75f * static_cast<float>(color + 1) / kColors
                          : kPalette[color][ch % 3];
      }
    }
  }
  return img;
}

std::size_t image_rule_oracle(const Sample& s, const SyntheticSpec& spec) {
  const auto rules = class_rules(spec);
  return lowest_consistent(rules, best_pattern(s, spec, rules), 0, true, false);
}

std::size_t text_rule_oracle(const Sample& s, const SyntheticSpec& spec, const Vocabulary&) {
  const auto rules = class_rules(spec);
  const std::size_t k = keyword_of(s, distinct(rules, true));
  return lowest_consistent(rules, 0, k, false, true);
}

std::size_t bimodal_rule_oracle(const Sample& s, const SyntheticSpec& spec, const Vocabulary&) {
  const auto rules = class_rules(spec);
  const std::size_t k = keyword_of(s, distinct(rules, true));
  return lowest_consistent(rules, best_pattern(s, spec, rules), k, true, true);
}

// ---------------------------------------------------------------------------
// Generation

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

void assign_splits(std::vector<Sample>& samples, std::size_t n_classes, std::uint64_t seed,
                   SplitManifest& manifest) {
  std::mt19937_64 rng(seed ^ 0x5eed5eed5eed5eedULL);
  manifest.train = manifest.val = manifest.test = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].label == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const double n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(manifest.train_ratio * n));
    const auto n_val = std::min(idx.size() - std::min(idx.size(), n_train),
                                static_cast<std::size_t>(std::llround(manifest.val_ratio * n)));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
      samples[idx[k]].split = s;
      (s == Split::train ? manifest.train : s == Split::val ? manifest.val : manifest.test)++;
    }
  }
}

Dataset generate(const SyntheticSpec& spec) {
  const auto errs = spec.validate();
  if (!errs.empty()) {
    std::string msg;
    for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
    throw ConfigError(msg);
  }
  const auto check = self_check(spec);
  if (check.image_ambiguous_fraction + 1e-12 < 1.0 - spec.image_informativeness ||
      check.text_ambiguous_fraction + 1e-12 < 1.0 - spec.text_informativeness) {
    throw ConfigError("generator self-check failed: ambiguous class fractions " +
                      std::to_string(check.image_ambiguous_fraction) + " / " +
                      std::to_string(check.text_ambiguous_fraction) +
                      " fall below 1 - informativeness");
  }

  Dataset d;
  d.spec = spec;
  const auto rules = class_rules(spec);
  const std::size_t n_keywords = distinct(rules, true);
  for (std::size_t k = 0; k < n_keywords; ++k) d.vocab.add(keyword_word(k));
  for (std::size_t f = 0; d.vocab.size() < spec.vocab_size; ++f) d.vocab.add(filler_word(f));
  const std::size_t first_filler = 2 + n_keywords;

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> shift(-kMaxShift, kMaxShift);
  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> filler(first_filler, spec.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> any_token(2, spec.vocab_size - 1);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::bernoulli_distribution corrupt(spec.noise_level);

  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      Sample s;
      s.label = c;
      const int dx = shift(rng), dy = shift(rng);
      s.image = render_pattern(rules[c].pattern, spec.image_size, spec.channels, dx, dy);
      for (std::size_t px = 0; px < spec.image_size * spec.image_size; ++px) {
        if (!corrupt(rng)) continue;
        for (std::size_t ch = 0; ch < spec.channels; ++ch) s.image[px * spec.channels + ch] = unit(rng);
      }
      const std::size_t len = length(rng);
      s.tokens.resize(len);
      for (auto& t : s.tokens) t = filler(rng);
      std::uniform_int_distribution<std::size_t> pos(0, len - 1);
      s.tokens[pos(rng)] = 2 + rules[c].keyword;
      for (auto& t : s.tokens)
        if (corrupt(rng)) t = any_token(rng);
      d.samples.push_back(std::move(s));
    }
  }
  assign_splits(d.samples, spec.n_classes, spec.seed, d.manifest);
  return d;
}

// ---------------------------------------------------------------------------
// Preprocessing

std::vector<float> preprocess_image(const std::vector<float>& raw, std::size_t height,
                                    std::size_t width, std::size_t channels, std::size_t side,
                                    float max_value) {
  if (height == 0 || width == 0 || channels == 0 || side == 0) {
    throw ShapeError("preprocess_image: zero-sized image or target");
  }
  if (raw.size() != height * width * channels) {
    throw ShapeError("preprocess_image: buffer holds " + std::to_string(raw.size()) +
                     " values, expected " + std::to_string(height * width * channels));
  }
  if (!(max_value > 0.0f)) throw ConfigError("preprocess_image: max_value must be positive");
  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    if (dst == 1 || src == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };
  std::vector<float> out(side * side * channels);
  for (std::size_t y = 0; y < side; ++y) {
    const double sy = coord(y, height, side);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < side; ++x) {
      const double sx = coord(x, width, side);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < channels; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) {
          return static_cast<double>(raw[(yy * width + xx) * channels + c]);
        };
        double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                   fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        v /= static_cast<double>(max_value);
        out[(y * side + x) * channels + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

std::string preprocess_text(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : raw) {
    if (std::isspace(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(ch)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream bin(dir / "images.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + (dir / "images.bin").string());

  nlohmann::ordered_json j;
  j["format"] = "mcfnet-dataset";
  j["version"] = 1;
  j["spec"] = nlohmann::ordered_json::parse(d.spec.to_json());
  j["vocab"] = nlohmann::ordered_json::parse(d.vocab.to_json());
  j["manifest"] = {{"train", d.manifest.train},
                   {"val", d.manifest.val},
                   {"test", d.manifest.test},
                   {"train_ratio", d.manifest.train_ratio},
                   {"val_ratio", d.manifest.val_ratio},
                   {"test_ratio", d.manifest.test_ratio}};
  j["image_shape"] = {d.spec.image_size, d.spec.image_size, d.spec.channels};
  auto samples = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& s : d.samples) {
    const std::size_t bytes = s.image.size() * sizeof(float);
    bin.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(bytes));
    samples.push_back({{"label", s.label},
                       {"split", to_string(s.split)},
                       {"tokens", s.tokens},
                       {"offset", offset},
                       {"length", s.image.size()}});
    offset += bytes;
  }
  j["n_samples"] = d.samples.size();
  j["samples"] = std::move(samples);
  if (!bin) throw IoError("failed writing " + (dir / "images.bin").string());

  std::ofstream js(dir / "dataset.json", std::ios::trunc);
  if (!js) throw IoError("cannot write " + (dir / "dataset.json").string());
  js << j.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream js(dir / "dataset.json");
  if (!js) throw IoError("cannot read " + (dir / "dataset.json").string());
  std::ifstream bin(dir / "images.bin", std::ios::binary);
  if (!bin) throw IoError("cannot read " + (dir / "images.bin").string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Dataset d;
  try {
    auto j = nlohmann::json::parse(js);
    if (j.value("format", "") != "mcfnet-dataset") {
      throw IoError("dataset.json has an unknown format tag");
    }
    d.spec = SyntheticSpec::from_json(j.at("spec").dump());
    d.vocab = Vocabulary::from_json(j.at("vocab").dump());
    const auto& m = j.at("manifest");
    d.manifest = {m.at("train").get<std::size_t>(),      m.at("val").get<std::size_t>(),
                  m.at("test").get<std::size_t>(),       m.at("train_ratio").get<double>(),
                  m.at("val_ratio").get<double>(),       m.at("test_ratio").get<double>()};
    const auto& samples = j.at("samples");
    if (samples.size() != j.at("n_samples").get<std::size_t>()) {
      throw IoError("dataset.json lists " + std::to_string(samples.size()) +
                    " samples but declares " + std::to_string(j.at("n_samples").get<std::size_t>()));
    }
    std::size_t described = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& e = samples[i];
      Sample s;
      s.label = e.at("label").get<std::size_t>();
      s.split = split_from_string(e.at("split").get<std::string>());
      s.tokens = e.at("tokens").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto length = e.at("length").get<std::size_t>();
      const std::size_t bytes = length * sizeof(float);
      if (offset % sizeof(float) != 0 || offset > blob.size() || bytes > blob.size() - offset) {
        throw IoError("sample " + std::to_string(i) + ": image at offset " +
                      std::to_string(offset) + " with " + std::to_string(bytes) +
                      " bytes lies outside images.bin (" + std::to_string(blob.size()) +
                      " bytes); the dataset is corrupt");
      }
      s.image.resize(length);
      std::memcpy(s.image.data(), blob.data() + offset, bytes);
      described += bytes;
      d.samples.push_back(std::move(s));
    }
    if (described != blob.size()) {
      throw IoError("images.bin holds " + std::to_string(blob.size()) +
                    " bytes but the manifest describes " + std::to_string(described));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset.json is malformed: ") + e.what());
  }
  return d;
}

}  // namespace mcfnet
