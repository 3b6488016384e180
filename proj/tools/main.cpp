// mcfnet command-line entry point.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mcfnet/commands.hpp"

using namespace mcfnet;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, mode, vote, topology, variant, spec, dataset;
  std::optional<double> gamma;
  std::optional<std::size_t> epochs;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "run config (JSON)");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--mode", f.mode, "cross-attention mode: sequence|pooled");
  cmd->add_option("--vote", f.vote, "vote strategy: confidence|learned|uniform");
  cmd->add_option("--gamma", f.gamma, "loss trade-off gamma");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--topology", f.topology, "hybrid|merged|interaction");
  cmd->add_option("--variant", f.variant, "full|image_only|text_only");
  cmd->add_option("--spec", f.spec, "synthetic spec (JSON), replaces the config's data source");
  cmd->add_option("--dataset", f.dataset, "saved dataset directory");
}

// Flags become a merge patch over the config file so that validation sees
// one document and reports every problem together.
json flag_patch(const CommonFlags& f) {
  json p = json::object();
  if (f.seed) p["seed"] = *f.seed;
  if (f.out) p["out"] = *f.out;
  if (f.mode) p["model"]["fusion"]["mode"] = *f.mode;
  if (f.topology) p["model"]["fusion"]["topology"] = *f.topology;
  if (f.vote) p["model"]["decision"]["vote"] = *f.vote;
  if (f.gamma) p["model"]["decision"]["gamma"] = *f.gamma;
  if (f.variant) p["model"]["variant"] = *f.variant;
  if (f.epochs) p["trainer"]["epochs"] = *f.epochs;
  if (f.spec) {
    json spec;
    try {
      spec = json::parse(read_text_file(*f.spec));
    } catch (const json::exception& e) {
      throw ConfigError("--spec " + *f.spec + " is not valid JSON: " + e.what());
    }
    p["data"] = {{"synthetic", spec}, {"dataset", nullptr}};
  }
  if (f.dataset) p["data"] = {{"dataset", *f.dataset}, {"synthetic", nullptr}};
  return p;
}

RunConfig load_config(const CommonFlags& f, const json& extra = json::object()) {
  const std::string text = f.config.empty() ? "" : read_text_file(f.config);
  json patch = flag_patch(f);
  patch.merge_patch(extra);
  return parse_run_config(text, patch.dump());
}

template <typename Row>
int rows_exit_code(const std::vector<Row>& rows) {
  for (const auto& r : rows)
    if (r.status.exit_code != kExitOk) return r.status.exit_code;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mcfnet: multimodal fusion classifier toolkit"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, ablate_f, sweep_f, bench_f;
  auto* gen = app.add_subcommand("generate", "generate a synthetic dataset");
  add_common(gen, gen_f);
  auto* train = app.add_subcommand("train", "train and evaluate one model");
  add_common(train, train_f);

  std::string run_dir, eval_out;
  auto* eval = app.add_subcommand("eval", "evaluate a finished train run");
  eval->add_option("--run", run_dir, "directory written by train")->required();
  eval->add_option("--out", eval_out, "output directory (default: the run directory)");

  auto* ablate = app.add_subcommand("ablate", "HAM / RM / MLF ablation");
  add_common(ablate, ablate_f);
  std::vector<std::uint64_t> ablate_seeds;
  ablate->add_option("--seeds", ablate_seeds, "seeds to repeat the plan with");

  auto* sweep = app.add_subcommand("gamma-sweep", "one run per gamma value");
  add_common(sweep, sweep_f);
  std::vector<double> grid;
  sweep->add_option("--grid", grid, "gamma values (default 0 0.1 ... 0.5)");

  auto* bench = app.add_subcommand("bench-attention", "time the three attention topologies");
  add_common(bench, bench_f);
  std::optional<std::size_t> repeats;
  bool with_accuracy = false;
  bench->add_option("--repeats", repeats, "timed passes per topology (>= 10)");
  bench->add_flag("--accuracy", with_accuracy, "also train each topology and report accuracy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) {
      cmd_generate(load_config(gen_f), std::cout);
    } else if (*train) {
      cmd_train(load_config(train_f), std::cout);
    } else if (*eval) {
      cmd_eval(run_dir, eval_out.empty() ? run_dir : eval_out, std::cout);
    } else if (*ablate) {
      json extra = json::object();
      if (!ablate_seeds.empty()) extra["ablation_seeds"] = ablate_seeds;
      return rows_exit_code(cmd_ablate(load_config(ablate_f, extra), std::cout));
    } else if (*sweep) {
      json extra = json::object();
      if (!grid.empty()) extra["gamma_grid"] = grid;
      return rows_exit_code(cmd_gamma_sweep(load_config(sweep_f, extra), std::cout));
    } else if (*bench) {
      json extra = json::object();
      if (repeats) extra["bench"]["repeats"] = *repeats;
      cmd_bench_attention(load_config(bench_f, extra), with_accuracy, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}
