// Runs one attacked cell next to its clean control and prints per-client
// losses and the failure verdict.

#include <cstdio>

#include "cflsim/cflsim.hpp"

int main() {
  using namespace cflsim;
  ExperimentConfig cfg;
  cfg.federation.attack.poison_fraction = 0.5;
  cfg.federation.attack.poison_level = 2.0;
  cfg.federation.selection_ratio = 0.8;

  const auto prepared = prepare_data(cfg);
  const auto run = run_federated(cfg.federation, prepared.data, prepared.partition);
  const auto control = run_federated(control_of(cfg).federation, prepared.data, prepared.partition);
  const auto verdict = classify_failures(run, control, cfg.failure);

  std::printf("client  poisoned  final_loss  control  failed\n");
  for (std::size_t k = 0; k < cfg.federation.clients; ++k) {
    std::printf("%6zu  %8s  %10.4f  %7.4f  %6s\n", k, run.poisoned.contains(k) ? "yes" : "no", verdict.final_losses[k],
                verdict.control_losses[k], verdict.failed[k] ? "yes" : "no");
  }
  std::printf("failed %zu/%zu clients (%.2f%%)\n", verdict.failed_count, cfg.federation.clients, verdict.percentage);
}
