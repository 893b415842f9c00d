#pragma once

// Experiment execution and persistence: single cells against an automatic
// matched control, grids of cells on a worker pool, the results tree, and
// the report/bounds builders.
//
// Results tree:
//   <out>/manifest.json
//   <out>/<cell_id>/trace.csv
//   <out>/<cell_id>/report.json
//   <out>/<cell_id>/timing.json
//   <out>/<cell_id>/checkpoints/{round_NNNNNN.bin, final.bin}

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cflsim/attack.hpp"
#include "cflsim/config.hpp"
#include "cflsim/data.hpp"
#include "cflsim/errors.hpp"
#include "cflsim/federation.hpp"
#include "cflsim/metrics.hpp"
#include "cflsim/model.hpp"

namespace cflsim {

inline constexpr int kReportSchema = 1;
inline constexpr int kManifestSchema = 1;

using json = nlohmann::json;

// ---------------------------------------------------------------- file I/O

/// Writes to "<path>.tmp" and renames over `path`, so readers see either the
/// old file or the complete new one.
inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ------------------------------------------------------ config <-> json

namespace detail {

/// JSON has no infinity; unbounded constraints are written as the string "inf".
inline json bound_to_json(double v) { return std::isinf(v) ? json("inf") : json(v); }
inline double bound_from_json(const json& j) { return j.is_string() ? std::numeric_limits<double>::infinity() : j.get<double>(); }

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  const auto& f = c.federation;
  json d = {{"name", c.dataset.name}, {"kind", c.dataset.kind}};
  if (c.dataset.kind == "synthetic") {
    d["rows"] = c.dataset.synth.rows;
    d["cols"] = c.dataset.synth.cols;
    d["latent_rank"] = c.dataset.synth.latent_rank;
    d["noise_sd"] = c.dataset.synth.noise_sd;
    d["seed"] = c.dataset.synth.seed;
  } else {
    d["path"] = c.dataset.path.string();
    d["label"] = c.dataset.label;
    d["delimiter"] = std::string(1, c.dataset.delimiter);
  }
  return {{"schema", kConfigSchema},
          {"dataset", d},
          {"federation",
           {{"clients", f.clients},
            {"p_c", f.attack.poison_fraction},
            {"p_l", f.attack.poison_level},
            {"r_l", f.selection_ratio},
            {"epsilon", detail::bound_to_json(f.attack.norm_bound)},
            {"tau", detail::bound_to_json(f.attack.stats_bound)},
            {"epochs", f.epochs},
            {"batch_size", f.batch_size},
            {"learning_rate", f.learning_rate},
            {"lambda", f.lambda},
            {"temperature", f.temperature},
            {"master_seed", f.master_seed}}},
          {"failure", {{"kappa", c.failure.ratio_threshold}, {"divergence_fails", c.failure.divergence_fails}}},
          {"output", {{"checkpoint_every", c.checkpoint_every}}}};
}

inline ExperimentConfig config_from_json(const json& j) {
  try {
    ExperimentConfig c;
    const auto& d = j.at("dataset");
    c.dataset.name = d.at("name").get<std::string>();
    c.dataset.kind = d.at("kind").get<std::string>();
    if (c.dataset.kind == "synthetic") {
      c.dataset.synth = {d.at("rows").get<std::size_t>(), d.at("cols").get<std::size_t>(),
                         d.at("latent_rank").get<std::size_t>(), d.at("noise_sd").get<double>(),
                         d.at("seed").get<std::uint64_t>()};
    } else {
      c.dataset.path = d.at("path").get<std::string>();
      c.dataset.label = d.at("label").get<std::string>();
      c.dataset.delimiter = d.at("delimiter").get<std::string>().at(0);
    }
    const auto& f = j.at("federation");
    auto& fc = c.federation;
    fc.clients = f.at("clients").get<std::size_t>();
    fc.attack.poison_fraction = f.at("p_c").get<double>();
    fc.attack.poison_level = f.at("p_l").get<double>();
    fc.selection_ratio = f.at("r_l").get<double>();
    fc.attack.norm_bound = detail::bound_from_json(f.at("epsilon"));
    fc.attack.stats_bound = detail::bound_from_json(f.at("tau"));
    fc.epochs = f.at("epochs").get<std::size_t>();
    fc.batch_size = f.at("batch_size").get<std::size_t>();
    fc.learning_rate = f.at("learning_rate").get<double>();
    fc.lambda = f.at("lambda").get<double>();
    fc.temperature = f.at("temperature").get<double>();
    fc.master_seed = f.at("master_seed").get<std::uint64_t>();
    c.failure.ratio_threshold = j.at("failure").at("kappa").get<double>();
    c.failure.divergence_fails = j.at("failure").at("divergence_fails").get<bool>();
    c.checkpoint_every = j.at("output").at("checkpoint_every").get<std::size_t>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config json: ") + e.what());
  }
}

// ------------------------------------------------------------- the grid

inline std::string format_param(double v) { return detail::format_double(v); }

inline std::string cell_id(const ExperimentConfig& c) {
  const auto& f = c.federation;
  return "pc" + format_param(f.attack.poison_fraction) + "_pl" + format_param(f.attack.poison_level) + "_rl" +
         format_param(f.selection_ratio) + "_s" + std::to_string(f.master_seed);
}

/// The clean reference every attacked cell is compared against.
inline ExperimentConfig control_of(ExperimentConfig c) {
  c.federation.attack.poison_fraction = 0.0;
  c.federation.attack.poison_level = 1.0;
  c.federation.selection_ratio = 1.0;
  return c;
}

struct GridCell {
  std::string id;
  ExperimentConfig config;
};

struct Setting {
  double poison_fraction;
  double poison_level;
  double selection_ratio;
};

/// One reconstruction of the 19-experiment design: every attacked combination
/// of p_c in {0.2, 0.5}, p_l in {0.1, 0.5, 2} and r_l in {1, 0.2, 0.8}
/// (18 cells) plus the clean control (p_c = 0, p_l = 1, r_l = 1).
inline std::vector<Setting> grid19_settings() {
  std::vector<Setting> s{{0.0, 1.0, 1.0}};
  for (double pc : {0.2, 0.5})
    for (double pl : {0.1, 0.5, 2.0})
      for (double rl : {1.0, 0.2, 0.8}) s.push_back({pc, pl, rl});
  return s;
}

inline std::vector<GridCell> expand_grid(const ExperimentConfig& base) {
  const auto& g = base.grid;
  std::vector<std::uint64_t> seeds = g.seeds.empty() ? std::vector<std::uint64_t>{base.federation.master_seed} : g.seeds;
  std::vector<Setting> settings;
  if (g.preset == "grid19") {
    require(g.poison_fractions.empty() && g.poison_levels.empty() && g.selection_ratios.empty(),
            "grid: preset 'grid19' cannot be combined with explicit p_c/p_l/r_l lists");
    settings = grid19_settings();
  } else {
    const auto& f = base.federation;
    const auto or_base = [](const std::vector<double>& v, double b) { return v.empty() ? std::vector<double>{b} : v; };
    for (double pc : or_base(g.poison_fractions, f.attack.poison_fraction))
      for (double pl : or_base(g.poison_levels, f.attack.poison_level))
        for (double rl : or_base(g.selection_ratios, f.selection_ratio)) settings.push_back({pc, pl, rl});
  }
  std::vector<GridCell> cells;
  std::set<std::string> seen;
  for (auto seed : seeds) {
    for (const auto& s : settings) {
      ExperimentConfig c = base;
      c.grid = {};
      c.federation.attack.poison_fraction = s.poison_fraction;
      c.federation.attack.poison_level = s.poison_level;
      c.federation.selection_ratio = s.selection_ratio;
      c.federation.master_seed = seed;
      auto id = cell_id(c);
      if (seen.insert(id).second) cells.push_back({std::move(id), std::move(c)});
    }
  }
  require(!cells.empty(), "grid: no cells");
  return cells;
}

// ------------------------------------------------------------ one cell

struct PreparedData {
  TabularDataset data;
  VerticalPartition partition;
};

inline PreparedData prepare_data(const ExperimentConfig& c) {
  TabularDataset raw = c.dataset.kind == "csv"
                           ? load_csv(c.dataset.path,
                                      c.dataset.label.empty() ? std::nullopt : std::optional<std::string>(c.dataset.label),
                                      c.dataset.delimiter)
                           : synthesize(c.dataset.synth);
  auto data = normalize(std::move(raw));
  auto partition = partition_vertical(data, c.federation.clients, derive_seed(c.federation.master_seed, "partition"));
  return {std::move(data), std::move(partition)};
}

inline std::string trace_csv(const FederatedRun& run) {
  std::string out =
      "t,selected_bitmask,poisoned_selected_count,client_id,loss_recon,loss_cont,agg_norm,diverged,"
      "delta_norm,stats_distance,norm_ok,stats_ok,poisoned,epoch\n";
  const auto num = [](double v) { return detail::format_double(v); };
  for (const auto& t : run.traces) {
    for (std::size_t k = 0; k < t.clients.size(); ++k) {
      const auto& c = t.clients[k];
      out += std::to_string(t.round) + ',' + std::to_string(t.selected_mask) + ',' + std::to_string(t.poisoned_selected) +
             ',' + std::to_string(k) + ',' + num(c.loss.reconstruction) + ',' + num(c.loss.contrastive) + ',' +
             num(t.aggregate_norm) + ',' + (t.diverged || c.loss.diverged ? "1" : "0") + ',' +
             num(c.constraints.delta_norm) + ',' + num(c.constraints.stats_distance) + ',' +
             (c.constraints.norm_ok ? "1" : "0") + ',' + (c.constraints.stats_ok ? "1" : "0") + ',' +
             (c.poisoned ? "1" : "0") + ',' + std::to_string(t.epoch) + '\n';
    }
  }
  return out;
}

struct ExperimentReport {
  std::string cell_id;
  ExperimentConfig config;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::vector<std::size_t>> partition;
  std::vector<std::size_t> poisoned_clients;
  std::size_t rounds = 0;
  std::size_t selected_per_round = 0;
  FailureResult failure;
  double final_loss = 0.0;
  bool diverged = false;
  std::size_t poisoned_contributions = 0;
  std::vector<std::string> checkpoints;
  double wall_seconds = 0.0;  // kept out of report.json so reruns stay byte-identical

  /// Everything except wall time.
  json to_json() const {
    json losses = json::array(), control = json::array(), flags = json::array();
    for (std::size_t k = 0; k < failure.failed.size(); ++k) {
      losses.push_back(failure.final_losses[k]);
      control.push_back(failure.control_losses[k]);
      flags.push_back(static_cast<bool>(failure.failed[k]));
    }
    const double denom = static_cast<double>(rounds) * static_cast<double>(config.federation.clients);
    return {{"schema_version", kReportSchema},
            {"cell_id", cell_id},
            {"config", cflsim::to_json(config)},
            {"dataset", {{"rows", rows}, {"cols", cols}, {"partition", partition}}},
            {"poisoned_clients", poisoned_clients},
            {"rounds", rounds},
            {"selected_per_round", selected_per_round},
            {"failure",
             {{"kappa", config.failure.ratio_threshold},
              {"divergence_fails", config.failure.divergence_fails},
              {"flags", flags},
              {"failed_clients", failure.failed_count},
              {"percentage", failure.percentage},
              {"final_losses", losses},
              {"control_final_losses", control}}},
            {"final_loss_mean", final_loss},
            {"diverged", diverged},
            {"exposure",
             {{"poisoned_contributions", poisoned_contributions},
              {"measured", denom > 0 ? static_cast<double>(poisoned_contributions) / denom : 0.0},
              {"bound_nominal", config.federation.attack.poison_fraction * config.federation.selection_ratio}}},
            {"checkpoints", checkpoints}};
  }

  RunSummary summary() const { return summary_of(to_json()); }

  static RunSummary summary_of(const json& report) {
    try {
      const auto cfg = config_from_json(report.at("config"));
      const auto& f = cfg.federation;
      RunSummary s;
      s.dataset = cfg.dataset.name;
      auto setting = cflsim::to_json(cfg);
      setting["federation"].erase("master_seed");
      s.setting = setting.dump();
      s.poison_fraction = f.attack.poison_fraction;
      s.poison_level = f.attack.poison_level;
      s.selection_ratio = f.selection_ratio;
      s.master_seed = f.master_seed;
      s.clients = f.clients;
      s.failed_clients = report.at("failure").at("failed_clients").get<std::size_t>();
      const auto& fl = report.at("final_loss_mean");
      s.final_loss = fl.is_null() ? std::numeric_limits<double>::quiet_NaN() : fl.get<double>();
      s.diverged = report.at("diverged").get<bool>();
      return s;
    } catch (const json::exception& e) {
      throw DataError(std::string("report json: ") + e.what());
    }
  }
};

inline std::string checkpoint_name(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%06zu.bin", round);
  return buf;
}

/// Runs one cell. When `out_root` is set, writes <out_root>/<cell_id>/. A
/// precomputed matched control may be passed in; otherwise it is run here.
inline ExperimentReport run_single(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out_root,
                                   const FederatedRun* control = nullptr) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto prepared = prepare_data(config);

  ExperimentReport report;
  report.cell_id = cell_id(config);
  report.config = config;
  report.rows = prepared.data.rows();
  report.cols = prepared.data.cols();
  report.partition = prepared.partition.assignments;
  const std::optional<std::filesystem::path> dir =
      out_root ? std::optional<std::filesystem::path>(*out_root / report.cell_id) : std::nullopt;

  RoundObserver observer;
  if (dir && config.checkpoint_every > 0) {
    observer = [&](const RoundTrace& t, const ParameterVector& global) {
      if ((t.round + 1) % config.checkpoint_every != 0) return;
      const auto name = checkpoint_name(t.round);
      write_atomic(*dir / "checkpoints" / name, serialize(global));
      report.checkpoints.push_back("checkpoints/" + name);
    };
  }
  const auto run = run_federated(config.federation, prepared.data, prepared.partition, observer);

  std::optional<FederatedRun> own_control;
  const auto control_cfg = control_of(config);
  if (!control) {
    if (to_json(control_cfg) == to_json(config)) {
      control = &run;
    } else {
      own_control = run_federated(control_cfg.federation, prepared.data, prepared.partition);
      control = &*own_control;
    }
  }
  report.failure = classify_failures(run, *control, config.failure);
  report.poisoned_clients = run.poisoned.members;
  report.rounds = run.traces.size();
  report.selected_per_round = selection_count(config.federation.clients, config.federation.selection_ratio);
  double sum = 0.0;
  for (std::size_t k = 0; k < config.federation.clients; ++k) {
    sum += report.failure.final_losses[k];
    report.diverged = report.diverged || run.client_diverged(k);
  }
  report.final_loss = sum / static_cast<double>(config.federation.clients);
  for (const auto& t : run.traces) report.poisoned_contributions += t.poisoned_selected;

  if (dir) {
    write_atomic(*dir / "trace.csv", trace_csv(run));
    write_atomic(*dir / "checkpoints" / "final.bin", serialize(run.global));
    report.checkpoints.push_back("checkpoints/final.bin");
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (dir) {
    write_atomic(*dir / "timing.json", json{{"wall_seconds", report.wall_seconds}}.dump(2) + "\n");
    write_atomic(*dir / "report.json", report.to_json().dump(2) + "\n");  // last: its presence marks a complete cell
  }
  return report;
}

// ------------------------------------------------------------ the grid run

/// Calls fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline json manifest_json(const ExperimentConfig& base, const std::vector<GridCell>& cells) {
  json list = json::array();
  for (const auto& c : cells) {
    const auto seeds = StreamSeeds::from(c.config.federation.master_seed);
    list.push_back({{"id", c.id},
                    {"p_c", c.config.federation.attack.poison_fraction},
                    {"p_l", c.config.federation.attack.poison_level},
                    {"r_l", c.config.federation.selection_ratio},
                    {"master_seed", c.config.federation.master_seed},
                    {"stream_seeds",
                     {{"init", seeds.init},
                      {"poison", seeds.poison},
                      {"selection", seeds.selection},
                      {"batches", seeds.batches},
                      {"masks", seeds.masks},
                      {"partition", derive_seed(c.config.federation.master_seed, "partition")}}},
                    {"config", to_json(c.config)}});
  }
  json grid = {{"preset", base.grid.preset},
               {"p_c", base.grid.poison_fractions},
               {"p_l", base.grid.poison_levels},
               {"r_l", base.grid.selection_ratios},
               {"seeds", base.grid.seeds}};
  std::string note = base.grid.preset == "grid19"
                         ? "grid19: 18 attacked cells (p_c in {0.2,0.5} x p_l in {0.1,0.5,2} x "
                           "r_l in {1,0.2,0.8}) plus one clean control (p_c=0, p_l=1, r_l=1), per seed"
                         : "";
  return {{"schema_version", kManifestSchema}, {"grid", grid}, {"note", note}, {"cells", list}};
}

struct CellOutcome {
  std::string id;
  std::optional<ExperimentReport> report;
  std::string error;
};

/// Runs every cell of the grid. Matched controls are computed once per
/// distinct control configuration. A failing cell is recorded and the grid
/// continues. Results do not depend on the worker count.
inline std::vector<CellOutcome> run_grid(const ExperimentConfig& base, const std::optional<std::filesystem::path>& out_root,
                                         std::size_t workers) {
  const auto cells = expand_grid(base);
  if (out_root) write_atomic(*out_root / "manifest.json", manifest_json(base, cells).dump(2) + "\n");

  std::map<std::string, std::size_t> control_index;
  std::vector<ExperimentConfig> control_cfgs;
  std::vector<std::size_t> cell_control(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto cfg = control_of(cells[i].config);
    const auto key = to_json(cfg).dump();
    const auto [it, inserted] = control_index.emplace(key, control_cfgs.size());
    if (inserted) control_cfgs.push_back(cfg);
    cell_control[i] = it->second;
  }
  std::vector<std::optional<FederatedRun>> controls(control_cfgs.size());
  std::vector<std::string> control_errors(control_cfgs.size());
  parallel_for(control_cfgs.size(), workers, [&](std::size_t i) {
    try {
      control_cfgs[i].validate();
      const auto prepared = prepare_data(control_cfgs[i]);
      controls[i] = run_federated(control_cfgs[i].federation, prepared.data, prepared.partition);
    } catch (const std::exception& e) {
      control_errors[i] = e.what();
    }
  });

  std::vector<CellOutcome> outcomes(cells.size());
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    auto& o = outcomes[i];
    o.id = cells[i].id;
    try {
      const auto& ctl = controls[cell_control[i]];
      if (!ctl) throw ConfigError("control run failed: " + control_errors[cell_control[i]]);
      o.report = run_single(cells[i].config, out_root, &*ctl);
    } catch (const std::exception& e) {
      o.error = e.what();
      if (out_root) {
        try {
          write_atomic(*out_root / cells[i].id / "error.txt", o.error + "\n");
        } catch (const std::exception&) {
        }
      }
    }
  });
  return outcomes;
}

/// Regenerates one manifest cell into `out_root`.
inline ExperimentReport rerun_cell(const std::filesystem::path& manifest_path, const std::string& id,
                                   const std::optional<std::filesystem::path>& out_root) {
  const auto manifest = read_json(manifest_path);
  for (const auto& cell : manifest.at("cells")) {
    if (cell.at("id").get<std::string>() == id) return run_single(config_from_json(cell.at("config")), out_root);
  }
  throw ConfigError("manifest has no cell '" + id + "'");
}

// ------------------------------------------------------------- reporting

inline std::string table_csv(const FailureTable& t) {
  std::string out = "dataset";
  for (double c : t.columns) out += "," + format_param(c);
  out += "\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out += detail::quote_if_needed(t.rows[r], ',');
    for (const auto& cell : t.cells[r]) {
      if (!cell) {
        out += ",NA";
        continue;
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.2f", cell->percentage());
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline json table_json(const FailureTable& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    json cells = json::array();
    for (const auto& cell : t.cells[r]) {
      cells.push_back(cell ? json{{"failed", cell->failed}, {"total", cell->total}, {"percentage", cell->percentage()}}
                           : json(nullptr));
    }
    rows.push_back({{"dataset", t.rows[r]}, {"cells", cells}});
  }
  return {{"parameter", t.parameter}, {"columns", t.columns}, {"rows", rows}};
}

inline std::string stability_csv(const std::vector<StabilityRow>& rows) {
  std::string out = "dataset,settings,runs,excluded_diverged,mean_sd\n";
  for (const auto& r : rows) {
    out += detail::quote_if_needed(r.dataset, ',') + "," + std::to_string(r.settings) + "," + std::to_string(r.runs) +
           "," + std::to_string(r.excluded_diverged) + "," + detail::format_double(r.mean_sd) + "\n";
  }
  return out;
}

struct ReportBundle {
  std::vector<RunSummary> runs;
  std::vector<std::string> missing_cells;
  std::map<std::string, FailureTable> tables;  // keyed by "pc", "pl", "rl"
  std::optional<std::vector<StabilityRow>> stability;
  std::string stability_error;
};

/// Reads <out>/manifest.json plus every completed cell report and writes
/// failure_table_{pc,pl,rl} and stability in the requested format.
inline ReportBundle build_report(const std::filesystem::path& out_root, Pooling pooling, const std::string& format) {
  require(format == "csv" || format == "json", "report: --format must be csv or json");
  const auto manifest = read_json(out_root / "manifest.json");
  ReportBundle b;
  for (const auto& cell : manifest.at("cells")) {
    const auto id = cell.at("id").get<std::string>();
    const auto path = out_root / id / "report.json";
    if (!std::filesystem::exists(path)) {
      b.missing_cells.push_back(id);
      continue;
    }
    b.runs.push_back(ExperimentReport::summary_of(read_json(path)));
  }
  require(!b.runs.empty(), "report: no completed cells under '" + out_root.string() + "'");
  for (const auto& [file_key, param] : std::vector<std::pair<std::string, std::string>>{{"pc", "p_c"}, {"pl", "p_l"}, {"rl", "r_l"}}) {
    auto table = failure_table(b.runs, param, pooling);
    if (format == "csv") {
      write_atomic(out_root / ("failure_table_" + file_key + ".csv"), table_csv(table));
    } else {
      write_atomic(out_root / ("failure_table_" + file_key + ".json"), table_json(table).dump(2) + "\n");
    }
    b.tables.emplace(file_key, std::move(table));
  }
  try {
    b.stability = stability_summary(b.runs);
  } catch (const ConfigError& e) {
    b.stability_error = e.what();
  }
  if (b.stability) {
    if (format == "csv") {
      write_atomic(out_root / "stability.csv", stability_csv(*b.stability));
    } else {
      json rows = json::array();
      for (const auto& r : *b.stability) {
        rows.push_back({{"dataset", r.dataset},
                        {"settings", r.settings},
                        {"runs", r.runs},
                        {"excluded_diverged", r.excluded_diverged},
                        {"mean_sd", r.mean_sd}});
      }
      write_atomic(out_root / "stability.json", rows.dump(2) + "\n");
    }
  }
  return b;
}

// ------------------------------------------------------------------ bounds

inline json to_json(const BoundCheck& b) {
  return {{"eta", b.learning_rate},
          {"mu", b.strong_convexity},
          {"r_l", b.selection_ratio},
          {"rounds", b.rounds},
          {"trials", b.trials},
          {"clients", b.clients},
          {"initial_sq_distance", b.initial_sq_distance},
          {"slack", b.slack},
          {"predicted", b.predicted},
          {"measured", b.measured},
          {"satisfied", b.satisfied}};
}

inline json to_json(const ExposureCheck& c) {
  return {{"p_c", c.poison_fraction},
          {"r_l", c.selection_ratio},
          {"bound", c.bound},
          {"rounds", c.rounds},
          {"clients", c.clients},
          {"poisoned_contributions", c.poisoned_contributions},
          {"measured", c.measured},
          {"sd", c.sd},
          {"satisfied", c.satisfied}};
}

struct ExposureCellCheck {
  double nominal_poison_fraction;
  double nominal_selection_ratio;
  ExposureCheck check;  // evaluated at the realized |P_c|/K and m/K
};

/// Selection-only exposure check for one grid cell. The bound is evaluated at
/// the realized probabilities |P_c|/K and m/K, which is what the rounding of
/// the poisoned-set size and of m turns the nominal p_c and r_l into.
inline ExposureCellCheck exposure_cell_check(std::size_t clients, double poison_fraction, double selection_ratio,
                                             std::size_t rounds, std::uint64_t seed) {
  const auto traces = simulate_selection(clients, poison_fraction, selection_ratio, rounds, seed);
  const double k = static_cast<double>(clients);
  const double realized_pc = static_cast<double>(poisoned_count(clients, poison_fraction)) / k;
  const double realized_rl = static_cast<double>(selection_count(clients, selection_ratio)) / k;
  return {poison_fraction, selection_ratio, attack_bound_check(traces, clients, realized_pc, realized_rl)};
}

struct BoundsResult {
  std::vector<BoundCheck> convergence;
  std::vector<ExposureCellCheck> exposure;
  bool all_satisfied() const {
    return std::all_of(convergence.begin(), convergence.end(), [](const auto& b) { return b.satisfied; }) &&
           std::all_of(exposure.begin(), exposure.end(), [](const auto& e) { return e.check.satisfied; });
  }
};

/// Convergence checks for (eta, mu, r_l) in {0.05, 0.1} x {1} x {0.2, 0.5, 0.8, 1}
/// over 50 rounds and 500 trials, and exposure checks over the default grid's
/// (p_c, r_l) cells with K = 8 and 10,000 rounds.
inline BoundsResult run_bounds(std::uint64_t seed, const std::optional<std::filesystem::path>& out_root,
                               std::size_t workers = 1) {
  BoundsResult r;
  std::vector<std::pair<double, double>> conv;
  for (double eta : {0.05, 0.1})
    for (double rl : {0.2, 0.5, 0.8, 1.0}) conv.emplace_back(eta, rl);
  std::vector<std::pair<double, double>> expo;
  for (double pc : {0.0, 0.2, 0.5})
    for (double rl : {1.0, 0.2, 0.8}) expo.emplace_back(pc, rl);
  r.convergence.resize(conv.size());
  r.exposure.resize(expo.size());
  parallel_for(conv.size() + expo.size(), workers, [&](std::size_t i) {
    if (i < conv.size()) {
      r.convergence[i] =
          convergence_bound_check(conv[i].first, 1.0, conv[i].second, 50, 500, derive_seed(seed, "convergence", i));
    } else {
      const auto j = i - conv.size();
      r.exposure[j] = exposure_cell_check(8, expo[j].first, expo[j].second, 10000, derive_seed(seed, "exposure", j));
    }
  });
  if (out_root) {
    json conv_json = json::array(), expo_json = json::array();
    for (const auto& b : r.convergence) conv_json.push_back(to_json(b));
    for (const auto& e : r.exposure) {
      auto j = to_json(e.check);
      j["nominal_p_c"] = e.nominal_poison_fraction;
      j["nominal_r_l"] = e.nominal_selection_ratio;
      expo_json.push_back(j);
    }
    const json doc = {{"schema_version", kReportSchema},
                      {"seed", seed},
                      {"convergence", conv_json},
                      {"exposure", expo_json},
                      {"all_satisfied", r.all_satisfied()}};
    write_atomic(*out_root / "bounds.json", doc.dump(2) + "\n");
  }
  return r;
}

}  // namespace cflsim
