#pragma once

#include <string>
#include <vector>

#include "utuning/train.hpp"
#include "utuning/verify.hpp"

namespace utuning {

/// One (layer, site, statistic) value over a batch of activations.
struct StatRow {
  int64_t layer;
  std::string site;
  std::string stat;
  double value;
};

/// Per-layer activation statistics at the five tap points (mha_in, mha_out,
/// ffn_in, ffn_out, block_out) over the first `batch_size` samples:
/// overall mean and variance plus min/mean/max of the per-channel means and
/// variances. Row count is layers x 5 x 8, fixed order.
std::vector<StatRow> collect_layer_stats(const ComposedModel& model, const Dataset& data,
                                         int64_t batch_size = 128);

void write_stats_csv(const std::string& path, const std::vector<StatRow>& rows);

double max_stat_diff(const std::vector<StatRow>& a, const std::vector<StatRow>& b);

struct GridRunOptions {
  uint64_t seed = 0;
  int64_t epochs = 0;  // 0 = schedule default
  Schedule schedule;
  int64_t batch_size = 32;
  int64_t tuner_dim = 10;
  int64_t train_size = 2000;
  int64_t test_size = 1000;
  std::string out_dir;  // per-config metrics CSVs land here when non-empty
};

struct GridRowResult {
  std::string name;
  int64_t params = 0;
  double first_train_loss = 0.0;
  double last_train_loss = 0.0;
  double final_test_acc = 0.0;
  bool ok = false;
  std::string error;
};

/// Fine-tunes every ablation-grid config against the frozen backbone.
/// The classifier head is restored to its entry state before each config so
/// runs are independent; per-config failures are recorded and the grid
/// continues.
std::vector<GridRowResult> run_ablation_grid(const Backbone& frozen, const SyntheticTask& task,
                                             const GridRunOptions& opts);

void write_grid_summary_csv(const std::string& path, const std::vector<GridRowResult>& rows);

}  // namespace utuning
