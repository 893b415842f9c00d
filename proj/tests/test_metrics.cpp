#include <gtest/gtest.h>

#include <cmath>

#include "cflsim/metrics.hpp"

namespace cflsim {
namespace {

RunSummary summary(std::string dataset, double pc, double pl, double rl, std::size_t failed, double loss = 1.0,
                   std::uint64_t seed = 1) {
  RunSummary s;
  s.dataset = std::move(dataset);
  s.poison_fraction = pc;
  s.poison_level = pl;
  s.selection_ratio = rl;
  s.setting = std::to_string(pc) + "/" + std::to_string(pl) + "/" + std::to_string(rl);
  s.master_seed = seed;
  s.clients = 8;
  s.failed_clients = failed;
  s.final_loss = loss;
  return s;
}

TEST(ClassifyFailures, SelfComparisonIsClean) {
  const std::vector<double> losses{0.3, 0.2, 0.9, 0.1};
  const auto r = classify_failures(losses, std::vector<bool>(4, false), losses, {});
  EXPECT_EQ(r.failed_count, 0u);
  EXPECT_EQ(r.percentage, 0.0);
}

TEST(ClassifyFailures, OneOfEight) {
  std::vector<double> control(8, 0.1), run(8, 0.1);
  run[3] = 0.2;
  const auto r = classify_failures(run, std::vector<bool>(8, false), control, {});
  EXPECT_EQ(r.failed_count, 1u);
  EXPECT_EQ(r.percentage, 12.5);
  EXPECT_TRUE(r.failed[3]);
}

TEST(ClassifyFailures, ThresholdAndDivergence) {
  const std::vector<double> control{1.0, 1.0, 1.0};
  const std::vector<double> run{1.5, std::nextafter(1.5, 2.0), 0.5};
  const std::vector<bool> diverged{false, false, true};
  EXPECT_EQ(classify_failures(run, diverged, control, {}).failed, (std::vector<bool>{false, true, true}));
  EXPECT_EQ(classify_failures(run, diverged, control, {1.5, false}).failed, (std::vector<bool>{false, true, false}));
  const std::vector<double> nan_run{std::nan(""), 1.0, 1.0};
  EXPECT_TRUE(classify_failures(nan_run, std::vector<bool>(3, false), control, {1.5, false}).failed[0]);
}

TEST(ClassifyFailures, Errors) {
  const std::vector<double> run{1.0};
  EXPECT_THROW(classify_failures(run, {false}, std::vector<double>{}, {}), ConfigError);
  EXPECT_THROW(classify_failures(run, {false}, std::vector<double>{1.0, 1.0}, {}), ConfigError);
  EXPECT_THROW(classify_failures(run, {false}, run, {1.0, true}), ConfigError);
}

TEST(FailureTable, AllZero) {
  std::vector<RunSummary> runs;
  for (double pc : {0.0, 0.2, 0.5}) runs.push_back(summary("a", pc, 1.0, 1.0, 0));
  const auto t = failure_table(runs, "p_c");
  EXPECT_EQ(t.columns, (std::vector<double>{0.0, 0.2, 0.5}));
  for (const auto& c : t.cells[0]) EXPECT_EQ(c->percentage(), 0.0);
}

TEST(FailureTable, NineteenRunGranularity) {
  std::vector<RunSummary> runs;
  for (int i = 0; i < 19; ++i) runs.push_back(summary("adult", 0.5, 0.1, 0.2, i < 3 ? 2 : 0, 1.0, static_cast<std::uint64_t>(i)));
  const auto t = failure_table(runs, "r_l", Pooling::Experiment);
  ASSERT_TRUE(t.cells[0][0].has_value());
  EXPECT_EQ(t.cells[0][0]->failed, 3u);
  EXPECT_EQ(t.cells[0][0]->total, 19u);
  EXPECT_NEAR(t.cells[0][0]->percentage(), 15.79, 0.005);
}

TEST(FailureTable, ConservationAcrossGroupings) {
  Rng rng(8);
  std::vector<RunSummary> runs;
  for (const char* d : {"a", "b"})
    for (double pc : {0.0, 0.2, 0.5})
      for (double pl : {0.1, 1.0, 2.0})
        for (double rl : {0.2, 0.8, 1.0}) runs.push_back(summary(d, pc, pl, rl, rng.below(9)));
  for (auto pooling : {Pooling::ClientRun, Pooling::Experiment}) {
    const auto by_pc = failure_table(runs, "p_c", pooling).total_failed();
    EXPECT_EQ(failure_table(runs, "p_l", pooling).total_failed(), by_pc);
    EXPECT_EQ(failure_table(runs, "r_l", pooling).total_failed(), by_pc);
  }
}

TEST(FailureTable, AbsentCellIsNotZero) {
  const std::vector<RunSummary> runs{summary("a", 0.2, 1, 1, 0), summary("b", 0.5, 1, 1, 0)};
  const auto t = failure_table(runs, "p_c");
  EXPECT_TRUE(t.cells[0][0].has_value());
  EXPECT_FALSE(t.cells[0][1].has_value());
  EXPECT_FALSE(t.cells[1][0].has_value());
  EXPECT_THROW(failure_table(runs, "lambda"), ConfigError);
}

TEST(Stability, IdenticalRunsGiveZero) {
  std::vector<RunSummary> runs;
  for (std::uint64_t s = 0; s < 4; ++s) runs.push_back(summary("a", 0.2, 0.5, 1.0, 0, 0.7, s));
  EXPECT_EQ(stability_summary(runs).front().mean_sd, 0.0);
}

TEST(Stability, MeanOfSettingSds) {
  // population sd of {x - d, x + d} is d
  const std::vector<RunSummary> runs{summary("a", 0.2, 0.5, 1, 0, 1.0 - 0.02), summary("a", 0.2, 0.5, 1, 0, 1.0 + 0.02),
                                     summary("a", 0.5, 0.5, 1, 0, 2.0 - 0.04), summary("a", 0.5, 0.5, 1, 0, 2.0 + 0.04),
                                     summary("a", 0.5, 0.5, 0.2, 0, 100.0), summary("a", 0.5, 0.5, 0.2, 0, -100.0)};
  const auto rows = stability_summary(runs);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].settings, 2u);
  EXPECT_NEAR(rows[0].mean_sd, 0.03, 1e-12);
}

TEST(Stability, InsufficientRuns) {
  EXPECT_THROW(stability_summary(std::vector<RunSummary>{summary("a", 0.2, 0.5, 1, 0)}), ConfigError);
  EXPECT_THROW(stability_summary(std::vector<RunSummary>{summary("a", 0.2, 0.5, 0.2, 0)}), ConfigError);
}

TEST(Stability, DivergedRunsAreCountedAndSkipped) {
  auto bad = summary("a", 0.2, 2.0, 1, 8, std::nan(""), 9);
  bad.diverged = true;
  const std::vector<RunSummary> runs{summary("a", 0.2, 2.0, 1, 0, 1.0, 1), summary("a", 0.2, 2.0, 1, 0, 1.0, 2), bad};
  const auto rows = stability_summary(runs);
  EXPECT_EQ(rows[0].excluded_diverged, 1u);
  EXPECT_EQ(rows[0].runs, 2u);
}

TEST(ExposureBound, CleanGridIsExactlyZero) {
  const auto traces = simulate_selection(8, 0.0, 0.5, 2000, 3);
  const auto c = attack_bound_check(traces, 8, 0.0, 0.5);
  EXPECT_EQ(c.measured, 0.0);
  EXPECT_EQ(c.bound, 0.0);
  EXPECT_TRUE(c.satisfied);
}

TEST(ExposureBound, FormulaSubstitution) {
  const auto traces = simulate_selection(8, 0.5, 0.75, 1000, 3);
  EXPECT_DOUBLE_EQ(attack_bound_check(traces, 8, 0.5, 0.8).bound, 0.4);
}

TEST(ExposureBound, HypergeometricExpectation) {
  const auto traces = simulate_selection(8, 0.25, 0.5, 10000, 17);
  const auto c = attack_bound_check(traces, 8, 0.25, 0.5);
  // E|S_t ∩ P_c| / K = 2 * (4 / 8) / 8
  EXPECT_NEAR(c.measured, 0.125, 4 * c.sd);
  EXPECT_TRUE(c.satisfied);
}

TEST(ExposureBound, NeedsEnoughRounds) {
  const auto traces = simulate_selection(8, 0.25, 0.5, 999, 1);
  EXPECT_THROW(attack_bound_check(traces, 8, 0.25, 0.5), ConfigError);
}

TEST(ConvergenceBound, PredictedSeries) {
  const auto b = convergence_bound_check(0.1, 1.0, 0.8, 10, 10, 1);
  ASSERT_EQ(b.predicted.size(), 11u);
  EXPECT_NEAR(b.predicted[10], 0.43439, 5e-6);
  EXPECT_EQ(b.predicted[10], std::pow(1.0 - 0.1 * 1.0 * 0.8, 10.0));
}

TEST(ConvergenceBound, ExactStepConvergesAtOnce) {
  const auto b = convergence_bound_check(0.5, 2.0, 1.0, 3, 5, 1);
  EXPECT_EQ(b.predicted[1], 0.0);
  EXPECT_EQ(b.measured[1], 0.0);
  EXPECT_TRUE(b.satisfied);
}

TEST(ConvergenceBound, MonteCarloSatisfiesBound) {
  for (double eta : {0.05, 0.1})
    for (double rl : {0.2, 0.5, 0.8, 1.0}) {
      const auto b = convergence_bound_check(eta, 1.0, rl, 50, 500, 42);
      EXPECT_TRUE(b.satisfied) << "eta=" << eta << " r_l=" << rl;
      EXPECT_EQ(b.measured[0], 1.0);
    }
}

TEST(ConvergenceBound, RejectsLargeStep) {
  EXPECT_THROW(convergence_bound_check(2.0, 1.0, 0.5, 10, 10, 1), ConfigError);
  EXPECT_THROW(convergence_bound_check(0.1, 1.0, 0.0, 10, 10, 1), ConfigError);
}

}  // namespace
}  // namespace cflsim
