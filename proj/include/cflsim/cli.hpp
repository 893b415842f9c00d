#pragma once

// Command-line surface: run | grid | report | bounds | synth.
// Exit codes: 0 success, 2 configuration error, 3 I/O error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cflsim/config.hpp"
#include "cflsim/errors.hpp"
#include "cflsim/runner.hpp"

namespace cflsim {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"cflsim: contrastive federated learning poisoning / random-selection simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string format = "csv";
  std::string pooling = "client";
  std::string manifest_path;
  std::string cell;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "master seed override");
    sub->add_option("--workers", workers, "parallel workers")->check(CLI::PositiveNumber);
    sub->add_option("--format", format, "output format")->check(CLI::IsMember({"csv", "json"}));
  };

  auto* run = app.add_subcommand("run", "run one experiment cell from a config file");
  add_common(run);
  run->add_option("--config", config_path, "config file");
  run->add_option("--manifest", manifest_path, "regenerate a cell recorded in this manifest.json");
  run->add_option("--cell", cell, "cell id inside --manifest");

  auto* grid = app.add_subcommand("grid", "run the full parameter sweep");
  add_common(grid);
  grid->add_option("--config", config_path, "config file")->required();

  auto* report = app.add_subcommand("report", "build failure tables and the stability summary from a results directory");
  add_common(report);
  report->add_option("--pooling", pooling, "client: failed client-runs / client-runs; experiment: failed runs / runs")
      ->check(CLI::IsMember({"client", "experiment"}));

  auto* bounds = app.add_subcommand("bounds", "validate the exposure and convergence bounds");
  add_common(bounds);

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset CSV");
  add_common(synth);
  synth->add_option("--config", config_path, "config file (dataset section)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    const auto need_out = [&](const char* cmd) {
      if (out_dir.empty()) throw ConfigError(std::string(cmd) + ": --out is required");
      return std::filesystem::path(out_dir);
    };
    const auto load = [&]() {
      auto cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
      if (seed) cfg.federation.master_seed = *seed;
      return cfg;
    };

    if (run->parsed()) {
      const auto root = need_out("run");
      ExperimentReport rep;
      if (!manifest_path.empty()) {
        if (cell.empty()) throw ConfigError("run: --manifest needs --cell");
        rep = rerun_cell(manifest_path, cell, root);
      } else {
        if (config_path.empty()) throw ConfigError("run: --config or --manifest is required");
        rep = run_single(load(), root);
      }
      out << rep.cell_id << ": failed " << rep.failure.failed_count << "/" << rep.config.federation.clients
          << " clients (" << rep.failure.percentage << "%)\n";
    } else if (grid->parsed()) {
      const auto root = need_out("grid");
      auto cfg = load();
      if (seed && cfg.grid.seeds.empty()) cfg.grid.seeds = {*seed};
      const auto outcomes = run_grid(cfg, root, workers);
      std::size_t failed = 0;
      for (const auto& o : outcomes) {
        if (!o.report) {
          ++failed;
          err << o.id << ": " << o.error << "\n";
        }
      }
      out << "grid: " << outcomes.size() - failed << "/" << outcomes.size() << " cells completed\n";
      if (failed == outcomes.size()) return kExitConfig;
    } else if (report->parsed()) {
      const auto root = need_out("report");
      const auto bundle = build_report(root, pooling == "client" ? Pooling::ClientRun : Pooling::Experiment, format);
      for (const auto& id : bundle.missing_cells) err << "warning: cell " << id << " has no report (absent)\n";
      if (!bundle.stability) err << "warning: stability summary skipped: " << bundle.stability_error << "\n";
      out << "report: " << bundle.runs.size() << " runs summarized\n";
    } else if (bounds->parsed()) {
      const auto root = need_out("bounds");
      const auto result = run_bounds(seed.value_or(1), root, workers);
      out << "bounds: " << (result.all_satisfied() ? "all satisfied" : "VIOLATED") << "\n";
    } else if (synth->parsed()) {
      const auto root = need_out("synth");
      auto cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
      if (seed) cfg.dataset.synth.seed = *seed;
      const auto ds = synthesize(cfg.dataset.synth);
      const auto path = root / (cfg.dataset.name + ".csv");
      write_atomic(path, to_csv(ds));
      out << "wrote " << path.string() << "\n";
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

}  // namespace cflsim
