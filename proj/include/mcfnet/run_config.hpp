#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mcfnet/data.hpp"
#include "mcfnet/model.hpp"

namespace mcfnet {

/// Where the training data comes from: a saved dataset directory, or a
/// synthetic spec generated on the fly.
struct DataSource {
  std::optional<std::filesystem::path> dataset;
  SyntheticSpec synthetic;
  bool synthetic_seed_given = false;  // otherwise the run seed is used
};

struct BenchConfig {
  std::size_t repeats = 20;
  std::size_t batch_size = 8;
  std::size_t text_length = 16;
};

/// Everything a command needs. Image geometry, vocabulary size and class
/// count are not configured directly; they follow the data (see
/// apply_data_shape).
struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  DataSource data;
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  std::vector<double> gamma_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<std::uint64_t> ablation_seeds;  // empty -> {seed}
  BenchConfig bench;

  /// Every problem found, each prefixed with its field path.
  std::vector<std::string> validate() const;

  /// Copies geometry, vocabulary size and class count from a data spec.
  void apply_data_shape(const SyntheticSpec& spec, std::size_t vocab_size);

  /// The synthetic spec with the run seed filled in when none was given.
  SyntheticSpec effective_spec() const;

  std::string to_json() const;
};

/// Parses a config document. Unknown keys, wrong types and bad enum names
/// are all collected; throws one ConfigError listing every problem.
/// An empty string yields the defaults. `overrides` is a JSON merge patch
/// applied before parsing (how command-line flags reach the config).
RunConfig parse_run_config(const std::string& text, const std::string& overrides = "");

/// Whole file as a string; IoError when it cannot be read.
std::string read_text_file(const std::filesystem::path& path);

/// Joins messages into one "; "-separated diagnostic.
std::string join_errors(const std::vector<std::string>& errors);

}  // namespace mcfnet
