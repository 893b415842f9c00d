#pragma once

// Failure classification against a matched clean control, failure tables,
// mean-of-std stability, and empirical checks of the attack-exposure and
// convergence bounds.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cflsim/attack.hpp"
#include "cflsim/errors.hpp"
#include "cflsim/federation.hpp"
#include "cflsim/random.hpp"

namespace cflsim {

struct FailureRule {
  double ratio_threshold = 1.5;  // kappa
  bool divergence_fails = true;

  void validate() const { require(ratio_threshold > 1.0, "failure rule: kappa must be > 1"); }
};

struct FailureResult {
  std::vector<bool> failed;
  std::vector<double> final_losses;
  std::vector<double> control_losses;
  std::size_t failed_count = 0;
  double percentage = 0.0;
};

/// Client k fails iff it diverged (when the rule counts divergence) or its
/// final-epoch loss exceeds kappa times the control's loss for the same client.
inline FailureResult classify_failures(std::span<const double> final_losses, const std::vector<bool>& diverged,
                                       std::span<const double> control_losses, const FailureRule& rule) {
  rule.validate();
  if (control_losses.empty()) throw ConfigError("classify_failures: missing control run");
  require(final_losses.size() == control_losses.size() && diverged.size() == final_losses.size(),
          "classify_failures: run and control have different client counts");
  FailureResult r;
  r.final_losses.assign(final_losses.begin(), final_losses.end());
  r.control_losses.assign(control_losses.begin(), control_losses.end());
  for (std::size_t k = 0; k < final_losses.size(); ++k) {
    const bool fail = (rule.divergence_fails && diverged[k]) || !(final_losses[k] <= rule.ratio_threshold * control_losses[k]);
    r.failed.push_back(fail);
    r.failed_count += fail ? 1 : 0;
  }
  r.percentage = 100.0 * static_cast<double>(r.failed_count) / static_cast<double>(final_losses.size());
  return r;
}

inline FailureResult classify_failures(const FederatedRun& run, const FederatedRun& control, const FailureRule& rule) {
  require(run.config.clients == control.config.clients && run.config.epochs == control.config.epochs &&
              run.traces.size() == control.traces.size(),
          "classify_failures: run and control must share K, epochs and batch schedule");
  const std::size_t k = run.config.clients;
  std::vector<double> losses(k), control_losses(k);
  std::vector<bool> diverged(k);
  for (std::size_t c = 0; c < k; ++c) {
    losses[c] = run.final_epoch_loss(c);
    control_losses[c] = control.final_epoch_loss(c);
    diverged[c] = run.client_diverged(c);
  }
  return classify_failures(losses, diverged, control_losses, rule);
}

/// Per-run outcome as consumed by the table and stability builders.
struct RunSummary {
  std::string dataset;
  std::string setting;  // every parameter except the master seed
  double poison_fraction = 0.0;
  double poison_level = 1.0;
  double selection_ratio = 1.0;
  std::uint64_t master_seed = 0;
  std::size_t clients = 0;
  std::size_t failed_clients = 0;
  double final_loss = 0.0;  // mean final-epoch reconstruction loss over clients
  bool diverged = false;
};

enum class Pooling {
  ClientRun,   // failed client-runs / client-runs
  Experiment,  // experiments with any failed client / experiments
};

inline double parameter_of(const RunSummary& s, const std::string& name) {
  if (name == "p_c") return s.poison_fraction;
  if (name == "p_l") return s.poison_level;
  if (name == "r_l") return s.selection_ratio;
  throw ConfigError("unknown table parameter '" + name + "' (expected p_c, p_l or r_l)");
}

struct TableCell {
  std::size_t failed = 0;
  std::size_t total = 0;
  double percentage() const { return total ? 100.0 * static_cast<double>(failed) / static_cast<double>(total) : 0.0; }
};

struct FailureTable {
  std::string parameter;
  std::vector<double> columns;
  std::vector<std::string> rows;
  std::vector<std::vector<std::optional<TableCell>>> cells;  // [row][column]; nullopt = absent

  std::size_t total_failed() const {
    std::size_t n = 0;
    for (const auto& row : cells)
      for (const auto& c : row)
        if (c) n += c->failed;
    return n;
  }
};

inline FailureTable failure_table(std::span<const RunSummary> runs, const std::string& group_by,
                                  Pooling pooling = Pooling::ClientRun) {
  FailureTable t;
  t.parameter = group_by;
  std::set<double> cols;
  std::set<std::string> rows;
  for (const auto& r : runs) {
    cols.insert(parameter_of(r, group_by));
    rows.insert(r.dataset);
  }
  t.columns.assign(cols.begin(), cols.end());
  t.rows.assign(rows.begin(), rows.end());
  t.cells.assign(t.rows.size(), std::vector<std::optional<TableCell>>(t.columns.size()));
  for (const auto& r : runs) {
    const auto ri = static_cast<std::size_t>(std::lower_bound(t.rows.begin(), t.rows.end(), r.dataset) - t.rows.begin());
    const auto ci = static_cast<std::size_t>(
        std::lower_bound(t.columns.begin(), t.columns.end(), parameter_of(r, group_by)) - t.columns.begin());
    auto& cell = t.cells[ri][ci];
    if (!cell) cell = TableCell{};
    if (pooling == Pooling::ClientRun) {
      cell->failed += r.failed_clients;
      cell->total += r.clients;
    } else {
      cell->failed += r.failed_clients > 0 ? 1 : 0;
      cell->total += 1;
    }
  }
  return t;
}

struct StabilityRow {
  std::string dataset;
  std::size_t settings = 0;
  std::size_t runs = 0;
  std::size_t excluded_diverged = 0;
  double mean_sd = 0.0;
};

inline double population_sd(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

/// Per dataset: population sd of final losses across the runs of each setting,
/// then the mean over settings. Runs at r_l == excluded_ratio are dropped, as
/// are diverged runs (they have no loss to compare).
inline std::vector<StabilityRow> stability_summary(std::span<const RunSummary> runs, double excluded_ratio = 0.2) {
  std::map<std::string, std::map<std::string, std::vector<double>>> groups;
  std::map<std::string, std::size_t> diverged;
  for (const auto& r : runs) {
    if (std::abs(r.selection_ratio - excluded_ratio) < 1e-12) continue;
    if (r.diverged || !std::isfinite(r.final_loss)) {
      ++diverged[r.dataset];
      continue;
    }
    groups[r.dataset][r.setting].push_back(r.final_loss);
  }
  std::vector<StabilityRow> out;
  for (const auto& [dataset, settings] : groups) {
    StabilityRow row{dataset, settings.size(), 0, diverged[dataset], 0.0};
    for (const auto& [setting, losses] : settings) {
      if (losses.size() < 2) {
        throw ConfigError("stability_summary: setting '" + setting + "' of dataset '" + dataset +
                          "' has fewer than 2 runs");
      }
      row.runs += losses.size();
      row.mean_sd += population_sd(losses);
    }
    row.mean_sd /= static_cast<double>(settings.size());
    out.push_back(row);
  }
  if (out.empty()) throw ConfigError("stability_summary: no runs left after exclusion");
  return out;
}

/// Selection-only replay of the attack surface: the poisoned set is fixed,
/// S_t is redrawn every round, no training happens.
inline std::vector<RoundTrace> simulate_selection(std::size_t clients, double poison_fraction, double selection_ratio,
                                                  std::size_t rounds, std::uint64_t master_seed) {
  const auto seeds = StreamSeeds::from(master_seed);
  const auto poisoned = choose_poisoned(clients, poison_fraction, seeds.poison);
  const SelectionPolicy policy{selection_ratio, seeds.selection};
  std::vector<RoundTrace> traces(rounds);
  for (std::size_t t = 0; t < rounds; ++t) {
    auto& tr = traces[t];
    tr.round = t;
    tr.selected = select_clients(clients, policy, t);
    tr.selected_mask = bitmask_of(tr.selected);
    tr.poisoned_selected = static_cast<std::size_t>(std::popcount(tr.selected_mask & poisoned.mask));
  }
  return traces;
}

struct ExposureCheck {
  double poison_fraction = 0.0;
  double selection_ratio = 0.0;
  double bound = 0.0;  // p_c * r_l
  std::size_t rounds = 0;
  std::size_t clients = 0;
  std::size_t poisoned_contributions = 0;
  double measured = 0.0;
  double sd = 0.0;
  bool satisfied = false;
};

/// measured = sum_t |S_t ∩ P_c| / (T K); satisfied iff measured <= p_c r_l + 3 sd
/// with sd the binomial sd of a proportion over T K trials.
inline ExposureCheck attack_bound_check(std::span<const RoundTrace> traces, std::size_t clients, double poison_fraction,
                                        double selection_ratio) {
  require(traces.size() >= 1000, "attack_bound_check: need at least 1000 pooled rounds");
  require(clients >= 1, "attack_bound_check: K must be >= 1");
  ExposureCheck c;
  c.poison_fraction = poison_fraction;
  c.selection_ratio = selection_ratio;
  c.bound = poison_fraction * selection_ratio;
  c.rounds = traces.size();
  c.clients = clients;
  for (const auto& t : traces) c.poisoned_contributions += t.poisoned_selected;
  const double trials = static_cast<double>(c.rounds) * static_cast<double>(clients);
  c.measured = static_cast<double>(c.poisoned_contributions) / trials;
  c.sd = std::sqrt(c.bound * (1.0 - c.bound) / trials);
  c.satisfied = c.measured <= c.bound + 3.0 * c.sd;
  return c;
}

struct BoundCheck {
  double learning_rate = 0.0;
  double strong_convexity = 0.0;
  double selection_ratio = 0.0;
  std::size_t rounds = 0;
  std::size_t trials = 0;
  std::size_t clients = 0;
  double initial_sq_distance = 1.0;
  double slack = 1.05;
  std::vector<double> predicted;  // index t = 0..rounds
  std::vector<double> measured;
  bool satisfied = false;
};

/// Convergence testbed: f(w) = mu/2 ||w - w*||^2 with one coordinate owned by
/// each of `clients` clients. Each round a uniform m-subset is selected and
/// only the selected owners take a gradient step, so every coordinate moves
/// with probability m/K. measured[t] is the mean over trials of ||w_t - w*||^2.
inline BoundCheck convergence_bound_check(double learning_rate, double strong_convexity, double selection_ratio,
                                          std::size_t rounds, std::size_t trials, std::uint64_t seed,
                                          std::size_t clients = 10) {
  require(learning_rate > 0.0 && strong_convexity > 0.0, "convergence_bound_check: eta and mu must be > 0");
  require(learning_rate * strong_convexity <= 1.0, "convergence_bound_check: step size violates eta * mu <= 1");
  require(selection_ratio > 0.0 && selection_ratio <= 1.0, "convergence_bound_check: r_l must lie in (0, 1]");
  require(rounds >= 1 && trials >= 1 && clients >= 1, "convergence_bound_check: rounds, trials and K must be >= 1");

  BoundCheck b;
  b.learning_rate = learning_rate;
  b.strong_convexity = strong_convexity;
  b.selection_ratio = selection_ratio;
  b.rounds = rounds;
  b.trials = trials;
  b.clients = clients;
  const double contraction = 1.0 - learning_rate * strong_convexity * selection_ratio;
  for (std::size_t t = 0; t <= rounds; ++t) b.predicted.push_back(std::pow(contraction, static_cast<double>(t)) * b.initial_sq_distance);

  // w* = 0; w_0 spreads unit squared distance evenly across coordinates
  std::vector<double> sums(rounds + 1, 0.0);
  std::vector<double> w(clients);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::fill(w.begin(), w.end(), std::sqrt(b.initial_sq_distance / static_cast<double>(clients)));
    const SelectionPolicy policy{selection_ratio, derive_seed(seed, "convergence-trial", trial)};
    sums[0] += b.initial_sq_distance;
    for (std::size_t t = 1; t <= rounds; ++t) {
      for (auto k : select_clients(clients, policy, t - 1)) w[k] -= learning_rate * strong_convexity * w[k];
      double sq = 0.0;
      for (double x : w) sq += x * x;
      sums[t] += sq;
    }
  }
  b.satisfied = true;
  for (std::size_t t = 0; t <= rounds; ++t) {
    b.measured.push_back(sums[t] / static_cast<double>(trials));
    // at t = 0 both sides are the same quantity up to rounding
    if (t > 0 && !(b.measured[t] <= b.slack * b.predicted[t])) b.satisfied = false;
  }
  return b;
}

}  // namespace cflsim
