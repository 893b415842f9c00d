#pragma once

// Model-scaling poisoning: a fixed subset of clients multiplies its
// parameters by a poison level alpha before they reach the aggregator.
// Detectability bounds on the perturbation are measured, never enforced.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cflsim/errors.hpp"
#include "cflsim/model.hpp"
#include "cflsim/random.hpp"

namespace cflsim {

struct AttackConfig {
  double poison_fraction = 0.0;  // p_c
  double poison_level = 1.0;     // p_l, the scaling factor alpha
  double norm_bound = std::numeric_limits<double>::infinity();
  double stats_bound = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;

  void validate() const {
    require(poison_fraction >= 0.0 && poison_fraction <= 1.0, "attack: p_c must lie in [0, 1]");
    require(poison_level > 0.0 && std::isfinite(poison_level), "attack: p_l must be finite and > 0");
    require(norm_bound >= 0.0, "attack: epsilon must be >= 0");
    require(stats_bound >= 0.0, "attack: tau must be >= 0");
  }
};

struct PoisonedSet {
  std::vector<std::size_t> members;  // ascending client indices
  std::uint64_t mask = 0;            // bit k set iff client k is poisoned

  std::size_t size() const { return members.size(); }
  bool contains(std::size_t k) const { return k < 64 && ((mask >> k) & 1u); }
};

inline std::size_t poisoned_count(std::size_t clients, double poison_fraction) {
  return std::min(clients, round_half_up(poison_fraction * static_cast<double>(clients)));
}

/// Uniform subset of size round_half_up(p_c * K), drawn once per experiment.
inline PoisonedSet choose_poisoned(std::size_t clients, double poison_fraction, std::uint64_t seed) {
  require(clients >= 1 && clients <= 64, "choose_poisoned: K must lie in [1, 64]");
  require(poison_fraction >= 0.0 && poison_fraction <= 1.0, "choose_poisoned: p_c must lie in [0, 1]");
  Rng rng(derive_seed(seed, "poison"));
  PoisonedSet set;
  set.members = rng.sample_without_replacement(clients, poisoned_count(clients, poison_fraction));
  for (auto k : set.members) set.mask |= std::uint64_t{1} << k;
  return set;
}

inline ParameterVector scale_attack(const ParameterVector& params, double alpha) {
  require(alpha > 0.0, "scale_attack: alpha must be > 0");
  ParameterVector out = params;
  for (double& v : out.values) v *= alpha;
  if (!out.all_finite()) out.diverged = true;
  return out;
}

struct ConstraintCheck {
  bool norm_ok = true;
  bool stats_ok = true;
  double delta_norm = 0.0;
  double stats_distance = 0.0;
};

/// (mean, population sd) of a flat vector.
inline std::pair<double, double> vector_stats(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

inline ConstraintCheck check_constraints(const ParameterVector& clean, const ParameterVector& poisoned, double norm_bound,
                                         double stats_bound) {
  require_same_layout(clean, poisoned, "check_constraints");
  ConstraintCheck c;
  double sq = 0.0;
  for (std::size_t i = 0; i < clean.values.size(); ++i) {
    const double d = poisoned.values[i] - clean.values[i];
    sq += d * d;
  }
  c.delta_norm = std::sqrt(sq);
  const auto [m0, s0] = vector_stats(clean.values);
  const auto [m1, s1] = vector_stats(poisoned.values);
  c.stats_distance = std::hypot(m1 - m0, s1 - s0);
  c.norm_ok = c.delta_norm <= norm_bound;
  c.stats_ok = c.stats_distance <= stats_bound;
  return c;
}

}  // namespace cflsim
