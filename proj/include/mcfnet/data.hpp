#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mcfnet/encoders.hpp"
#include "mcfnet/sample.hpp"

namespace mcfnet {

/// Parameters of the synthetic image/text classification task.
///
/// Every class is a (pattern, keyword) pair. A fraction 1 - image_informativeness
/// of the classes share their pattern with another class (groups of two, or
/// three when the count is odd), so the image alone cannot separate them; the
/// same holds for keywords and text_informativeness. The image-ambiguous
/// classes are taken from the front of the class list and the text-ambiguous
/// ones from the back, so the two sets are disjoint whenever the
/// informativeness values sum to at least 1.
struct SyntheticSpec {
  std::size_t n_classes = 8;
  std::size_t samples_per_class = 40;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t vocab_size = 64;  // including PAD and UNK
  std::size_t min_length = 4;
  std::size_t max_length = 8;
  double image_informativeness = 0.5;
  double text_informativeness = 0.5;
  double noise_level = 0.05;
  std::uint64_t seed = 0;

  std::vector<std::string> validate() const;
  std::string to_json() const;
  static SyntheticSpec from_json(const std::string& text);
  static SyntheticSpec load(const std::filesystem::path& path);

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

struct ClassRule {
  std::size_t pattern = 0;
  std::size_t keyword = 0;
};

/// The generating rules: one (pattern, keyword) pair per class.
std::vector<ClassRule> class_rules(const SyntheticSpec& spec);

/// Exhaustive lookup-table oracles over the class rules (class-balanced,
/// noise free). Each oracle predicts the lowest class consistent with the
/// observed attribute(s).
struct InformativenessReport {
  double image_oracle_accuracy = 0.0;
  double text_oracle_accuracy = 0.0;
  double bimodal_oracle_accuracy = 0.0;
  double image_ambiguous_fraction = 0.0;  // classes sharing their pattern
  double text_ambiguous_fraction = 0.0;   // classes sharing their keyword
};

InformativenessReport self_check(const SyntheticSpec& spec);

struct SplitManifest {
  std::size_t train = 0, val = 0, test = 0;
  double train_ratio = 0.6, val_ratio = 0.1, test_ratio = 0.3;

  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

struct Dataset {
  SyntheticSpec spec;
  Vocabulary vocab;
  std::vector<Sample> samples;
  SplitManifest manifest;

  std::vector<std::size_t> indices(Split split) const;
};

/// Deterministic under spec.seed. Throws ConfigError for an inconsistent spec
/// or when the self-check finds the informativeness contract violated.
Dataset generate(const SyntheticSpec& spec);

/// Stratified per-class split by the given ratios (train, val, rest to test).
void assign_splits(std::vector<Sample>& samples, std::size_t n_classes, std::uint64_t seed,
                   SplitManifest& manifest);

/// Renders the noise-free image of `pattern` with its top-left shift (dx, dy).
std::vector<float> render_pattern(std::size_t pattern, std::size_t side, std::size_t channels,
                                  int dx, int dy);

/// Rule-based classifiers on generated samples: the image oracle recovers the
/// pattern by template matching over every allowed shift, the text oracle by
/// finding a keyword token. Both then apply the class lookup table.
std::size_t image_rule_oracle(const Sample& s, const SyntheticSpec& spec);
std::size_t text_rule_oracle(const Sample& s, const SyntheticSpec& spec, const Vocabulary& vocab);
std::size_t bimodal_rule_oracle(const Sample& s, const SyntheticSpec& spec, const Vocabulary& vocab);

/// Maximum absolute shift applied to rendered patterns.
inline constexpr int kMaxShift = 3;

/// Bilinear resize (corner-aligned) to side x side, then division by
/// max_value and clamping to [0, 1]. Throws ShapeError for empty input.
std::vector<float> preprocess_image(const std::vector<float>& raw, std::size_t height,
                                    std::size_t width, std::size_t channels, std::size_t side,
                                    float max_value = 1.0f);

/// Lowercase, collapse whitespace runs to one space, trim.
std::string preprocess_text(std::string_view raw);

/// dataset.json + images.bin (little-endian float32).
void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mcfnet
