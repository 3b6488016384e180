#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mcfnet/run_config.hpp"

namespace mcfnet {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitIo = 4,
};

/// Maps an exception to its exit code (shape problems count as config errors).
int exit_code_for(const std::exception& e);

/// Loads or generates the configured data and copies its shape into the
/// model config, revalidating; ConfigError if the result is inconsistent.
Dataset obtain_dataset(RunConfig& config);

struct TrainedRun {
  std::unique_ptr<MCFNet<float>> model;
  ParamList<float> initial;                 // copy of the parameters before training
  std::vector<LossBreakdown> epoch_losses;  // mean per epoch
  MetricsReport test_metrics;
};

/// Builds the model from config.seed, trains for config.trainer.epochs over
/// the train split and evaluates on the test split.
TrainedRun train_and_evaluate(const RunConfig& config, const Dataset& data,
                              std::ostream* log = nullptr);

/// Columns: epoch, loss_T, loss_H, loss_I, total (full precision).
void write_loss_history(const std::vector<LossBreakdown>& epochs, const std::filesystem::path& path);

// --- commands ----------------------------------------------------------------

/// Writes the dataset plus informativeness.json to config.out.
void cmd_generate(RunConfig config, std::ostream& log);

/// Writes config.json, checkpoint/, metrics.json, pr_curve.csv and
/// loss_history.csv to config.out.
void cmd_train(RunConfig config, std::ostream& log);

/// Re-evaluates a finished train run (its config.json and checkpoint/) on the
/// test split; writes metrics.json and pr_curve.csv to `out`.
MetricsReport cmd_eval(const std::filesystem::path& run_dir, const std::filesystem::path& out,
                       std::ostream& log);

/// Outcome of one sub-run of a multi-run command. A failed row keeps its
/// error message and exit code; later rows still run.
struct RowStatus {
  std::optional<double> accuracy;
  std::optional<double> macro_f1;
  std::string error;
  int exit_code = kExitOk;
};

struct AblationRow {
  bool ham = true, rm = true, mlf = true;
  std::uint64_t seed = 0;
  RowStatus status;
};

/// Every HAM/RM/MLF combination for every ablation seed. MLF off trains
/// with gamma = 0, on with the configured gamma. Writes ablation.csv and
/// pr_curves/<row>.csv under config.out.
std::vector<AblationRow> cmd_ablate(RunConfig config, std::ostream& log);

struct SweepRow {
  double gamma = 0.0;
  RowStatus status;
};

/// One run per gamma_grid value; writes gamma_sweep.csv and
/// gamma_sweep_notes.txt under config.out.
std::vector<SweepRow> cmd_gamma_sweep(RunConfig config, std::ostream& log);

struct BenchRow {
  Topology topology = Topology::hybrid;
  std::size_t parameters = 0;           // counted from the built module
  std::size_t analytic_parameters = 0;  // closed form
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t repeats = 0;
  std::size_t timed_passes = 0;         // samples behind the statistics (warmups excluded)
  std::size_t batch_size = 0;
  std::optional<double> accuracy;       // only with train_accuracy
};

/// Closed-form parameter count of the interaction-branch topology for
/// encoder width d.
std::size_t analytic_topology_parameters(Topology topology, std::size_t d, const FusionConfig& f);

/// Median / p95 of `values` (nearest rank). Empty input gives zeros.
std::pair<double, double> median_p95(std::vector<double> values);

/// Times the fusion forward pass for each topology: 3 untimed warmups, then
/// bench.repeats timed passes on a fixed random batch. With train_accuracy
/// each topology is also trained and evaluated. Writes bench.csv.
std::vector<BenchRow> cmd_bench_attention(RunConfig config, bool train_accuracy, std::ostream& log);

}  // namespace mcfnet
