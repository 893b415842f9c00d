#pragma once

// Coordinator: per-round random client selection, FedAvg-style aggregation
// over the selected clients, and the epoch/batch training loop in which every
// client trains locally, poisoned clients rescale, and all clients adopt the
// aggregate.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "cflsim/attack.hpp"
#include "cflsim/data.hpp"
#include "cflsim/errors.hpp"
#include "cflsim/model.hpp"
#include "cflsim/random.hpp"

namespace cflsim {

/// m = max(1, round_half_up(K * r_l)), capped at K.
inline std::size_t selection_count(std::size_t clients, double ratio) {
  return std::clamp<std::size_t>(round_half_up(ratio * static_cast<double>(clients)), 1, clients);
}

struct SelectionPolicy {
  double ratio = 1.0;  // r_l, fraction of clients aggregated per round
  std::uint64_t seed = 0;

  void validate() const { require(ratio > 0.0 && ratio <= 1.0, "selection: r_l must lie in (0, 1]"); }
  std::size_t count(std::size_t clients) const { return selection_count(clients, ratio); }
};

/// Fresh uniform m-subset of {0..K-1} for round t, ascending.
inline std::vector<std::size_t> select_clients(std::size_t clients, const SelectionPolicy& policy, std::uint64_t round) {
  policy.validate();
  require(clients >= 1, "select_clients: K must be >= 1");
  Rng rng(derive_seed(policy.seed, "select", round));
  return rng.sample_without_replacement(clients, policy.count(clients));
}

inline std::uint64_t bitmask_of(std::span<const std::size_t> clients) {
  std::uint64_t m = 0;
  for (auto k : clients) m |= std::uint64_t{1} << k;
  return m;
}

namespace detail {

/// Exactly rounded floating-point sum (Shewchuk partials), so the result does
/// not depend on the order of the inputs.
inline double exact_sum(std::span<const double> xs) {
  std::vector<double> partials;
  for (double x : xs) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }
  if (partials.empty()) return 0.0;
  // sum from the top, correcting the final half-way rounding case
  std::size_t n = partials.size();
  double hi = partials[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[--n];
    hi = x + y;
    const double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

inline ParameterVector aggregate_ptrs(const std::vector<const ParameterVector*>& updates) {
  if (updates.empty()) throw ConfigError("aggregate: empty update set");
  const auto& first = *updates.front();
  bool diverged = false;
  for (const auto* u : updates) {
    require_same_layout(first, *u, "aggregate");
    diverged = diverged || u->diverged;
  }
  ParameterVector out{std::vector<double>(first.size()), first.layout, diverged};
  std::vector<double> column(updates.size());
  const double count = static_cast<double>(updates.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    for (std::size_t k = 0; k < updates.size(); ++k) column[k] = updates[k]->values[i];
    out.values[i] = exact_sum(column) / count;
  }
  if (!out.all_finite()) out.diverged = true;
  return out;
}

}  // namespace detail

/// Coordinate-wise arithmetic mean. Each coordinate is the correctly rounded
/// sum divided by the count, hence exactly permutation invariant.
inline ParameterVector aggregate(std::span<const ParameterVector> updates) {
  std::vector<const ParameterVector*> ptrs;
  for (const auto& u : updates) ptrs.push_back(&u);
  return detail::aggregate_ptrs(ptrs);
}

/// Mean over the selected clients only; everything outside `selected` is ignored.
inline ParameterVector aggregate(std::span<const ParameterVector> updates, std::span<const std::size_t> selected) {
  std::vector<const ParameterVector*> ptrs;
  for (auto k : selected) {
    require(k < updates.size(), "aggregate: selected client index out of range");
    ptrs.push_back(&updates[k]);
  }
  return detail::aggregate_ptrs(ptrs);
}

struct FederationConfig {
  std::size_t clients = 8;
  AttackConfig attack;
  double selection_ratio = 1.0;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double lambda = 0.1;
  double temperature = 0.5;
  std::uint64_t master_seed = 1;

  void validate() const {
    require(clients >= 1 && clients <= 64, "config: K must lie in [1, 64]");
    attack.validate();
    require(selection_ratio > 0.0 && selection_ratio <= 1.0, "config: r_l must lie in (0, 1]");
    require(epochs >= 1, "config: epochs must be >= 1");
    require(batch_size >= 1, "config: batch_size must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), "config: learning_rate must be > 0");
    require(lambda >= 0.0, "config: lambda must be >= 0");
    require(temperature > 0.0, "config: temperature must be > 0");
    require(lambda == 0.0 || batch_size >= 2, "config: the contrastive term (lambda > 0) needs batch_size >= 2");
  }
};

/// Independent stream seeds derived from the master seed by name.
struct StreamSeeds {
  std::uint64_t init;
  std::uint64_t poison;
  std::uint64_t selection;
  std::uint64_t batches;
  std::uint64_t masks;

  static StreamSeeds from(std::uint64_t master) {
    return {derive_seed(master, "init"), derive_seed(master, "poison"), derive_seed(master, "selection"),
            derive_seed(master, "batches"), derive_seed(master, "masks")};
  }
};

struct ClientRoundRecord {
  LossReport loss;
  bool poisoned = false;
  ConstraintCheck constraints;  // identity values for clean clients
};

struct RoundTrace {
  std::size_t round = 0;
  std::size_t epoch = 0;
  std::vector<std::size_t> selected;
  std::uint64_t selected_mask = 0;
  std::size_t poisoned_selected = 0;
  std::vector<ClientRoundRecord> clients;
  double aggregate_norm = 0.0;
  bool diverged = false;
};

struct FederatedRun {
  FederationConfig config;
  AutoencoderShape shape;
  PoisonedSet poisoned;
  std::size_t batches_per_epoch = 0;
  std::vector<RoundTrace> traces;
  ParameterVector global;
  std::vector<ParameterVector> client_params;

  /// Mean reconstruction loss of client k over the last epoch's rounds.
  double final_epoch_loss(std::size_t k) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : traces) {
      if (t.epoch + 1 != config.epochs) continue;
      sum += t.clients[k].loss.reconstruction;
      ++n;
    }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }

  bool client_diverged(std::size_t k) const {
    return std::any_of(traces.begin(), traces.end(), [k](const RoundTrace& t) { return t.clients[k].loss.diverged || t.diverged; });
  }
};

/// Rows `rows` of the client's columns, zero-padded on the right to `width`.
inline Eigen::MatrixXd client_block(const Eigen::MatrixXd& features, std::span<const std::size_t> rows,
                                    std::span<const std::size_t> columns, std::size_t width) {
  Eigen::MatrixXd block = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < columns.size(); ++c)
      block(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          features(static_cast<Eigen::Index>(rows[r]), static_cast<Eigen::Index>(columns[c]));
  return block;
}

using RoundObserver = std::function<void(const RoundTrace&, const ParameterVector& global)>;

/// One shared autoencoder shape sized to the widest slice; narrower slices are
/// zero-padded so every client's parameters live in the same space.
inline FederatedRun run_federated(const FederationConfig& config, const TabularDataset& data,
                                  const VerticalPartition& partition, const RoundObserver& observer = {}) {
  config.validate();
  require(partition.clients() == config.clients, "run_federated: partition has " + std::to_string(partition.clients()) +
                                                     " clients but config.K = " + std::to_string(config.clients));
  for (const auto& cols : partition.assignments) {
    require(!cols.empty(), "run_federated: a client holds no columns");
    for (auto c : cols) require(c < data.cols(), "run_federated: partition references a column outside the dataset");
  }
  require(data.rows() >= 1, "run_federated: empty dataset");
  if (config.lambda > 0.0 && data.rows() % config.batch_size == 1 && data.rows() > 1) {
    // the trailing batch would hold a single row; the contrastive term needs two
    throw ConfigError("run_federated: N mod batch_size == 1 leaves a one-row batch, which the contrastive term rejects");
  }

  const auto seeds = StreamSeeds::from(config.master_seed);
  const std::size_t width = partition.max_width();

  FederatedRun run;
  run.config = config;
  run.shape = AutoencoderShape::defaults_for(width);
  run.poisoned = choose_poisoned(config.clients, config.attack.poison_fraction, seeds.poison);
  run.global = init_params(run.shape, seeds.init);
  const std::size_t n = data.rows();
  run.batches_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  run.traces.reserve(config.epochs * run.batches_per_epoch);

  const SelectionPolicy policy{config.selection_ratio, seeds.selection};
  std::vector<std::size_t> order(n);
  std::vector<ParameterVector> locals(config.clients);
  std::size_t round = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng batch_rng(derive_seed(seeds.batches, "epoch", epoch));
    batch_rng.shuffle(order);

    for (std::size_t b = 0; b < run.batches_per_epoch; ++b, ++round) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(n, begin + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);

      RoundTrace trace;
      trace.round = round;
      trace.epoch = epoch;
      trace.clients.resize(config.clients);
      for (std::size_t k = 0; k < config.clients; ++k) {
        const auto block = client_block(data.features, rows, partition.assignments[k], width);
        const LossOptions opt{config.lambda, config.temperature, derive_seed(seeds.masks, "client-round", round, k)};
        auto lg = loss_and_grad(run.global, block, opt);
        auto local = sgd_step(run.global, lg.grad, config.learning_rate);
        auto& rec = trace.clients[k];
        rec.loss = lg.loss;
        if (run.poisoned.contains(k)) {
          rec.poisoned = true;
          auto scaled = scale_attack(local, config.attack.poison_level);
          rec.constraints = check_constraints(local, scaled, config.attack.norm_bound, config.attack.stats_bound);
          local = std::move(scaled);
        }
        locals[k] = std::move(local);
      }

      trace.selected = select_clients(config.clients, policy, round);
      trace.selected_mask = bitmask_of(trace.selected);
      trace.poisoned_selected = static_cast<std::size_t>(std::popcount(trace.selected_mask & run.poisoned.mask));
      run.global = aggregate(locals, trace.selected);
      trace.aggregate_norm = run.global.norm();
      trace.diverged = run.global.diverged ||
                       std::any_of(trace.clients.begin(), trace.clients.end(), [](const auto& c) { return c.loss.diverged; });
      if (observer) observer(trace, run.global);
      run.traces.push_back(std::move(trace));
    }
  }
  run.client_params.assign(config.clients, run.global);
  return run;
}

}  // namespace cflsim
