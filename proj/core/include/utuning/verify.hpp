#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "utuning/composer.hpp"

namespace utuning {

struct CaseResult {
  std::string name;
  double metric = 0.0;     // max abs diff or max rel err, depending on suite
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

struct Report {
  std::string command;
  uint64_t seed = 0;
  std::vector<CaseResult> cases;
  double wall_time_ms = 0.0;
  std::string version;

  int64_t passed() const;
  int64_t failed() const;
  bool pass() const { return failed() == 0; }
  std::string to_json_string() const;
  void write_json(const std::string& path) const;
  /// One line per case plus a summary, for terminal output.
  std::string to_text() const;
};

enum class EquivalenceType { prefix, prompt, adapter };

struct EquivalenceOptions {
  uint64_t seed = 42;
  int cases_per_type = 100;
  std::set<EquivalenceType> types = {EquivalenceType::prefix, EquivalenceType::prompt,
                                     EquivalenceType::adapter};
  GateOverride gate_override = GateOverride::none;  // corrupt = negative control
  double tol_prefix = 1e-9;
  double tol_prompt = 1e-9;
  double tol_adapter = 1e-12;
  double tol_gate = 1e-12;
  bool check_gates = true;
};

/// Randomized original-vs-parallel certification over the sampled regime
/// (T in 1..8, d in {8,16,64}, heads in {1,2,4}, tuner dims in {1,4,10}).
/// Each case also checks that the per-query gates lie strictly inside (0,1)
/// and that the gated recombination reproduces the joint softmax row.
Report run_equivalence_suite(const EquivalenceOptions& opts);

struct GradCheckOptions {
  uint64_t seed = 7;
  double tolerance = 1e-4;
  double fd_step = 1e-5;
  /// Configs to check; empty means the 9 single-site grid configs plus the
  /// default dual config.
  std::vector<UTuningConfig> configs;
  /// Compact backbone keeps the finite-difference sweep affordable.
  BackboneConfig backbone = grad_check_backbone();
  int64_t tuner_dim = 3;
  int64_t batch = 2;
  int64_t adamw_steps = 10;

  static BackboneConfig grad_check_backbone();
};

/// Analytic-vs-central-difference check of every trainable tensor for each
/// config, plus a bit-identity check on frozen tensors after AdamW steps.
Report run_gradient_suite(const GradCheckOptions& opts);

/// Parameter-count certification: classifier-head and deep-prompt counts on
/// the vitb16 preset against their closed forms and reported rounded
/// figures, plus an L x n x d sweep matching enumeration exactly.
Report run_param_count_report(uint64_t seed = 0);

struct ZeroInitOptions {
  uint64_t seed = 3;
  int64_t batches = 10;
  int64_t batch_size = 4;
  double tolerance = 1e-12;
};

/// All-adapter grid configs must match the frozen backbone exactly at init;
/// every grid config must match it when deltas are forced to zero.
Report run_zero_init_suite(const ZeroInitOptions& opts);

std::string param_group_table(const std::vector<std::pair<std::string, Var>>& named);

}  // namespace utuning
