#pragma once

#include <functional>
#include <string>
#include <vector>

#include "utuning/composer.hpp"

namespace utuning {

/// How the downstream distribution differs from the pretraining one:
/// prototypes are rotated in a random 2-plane, offset by a fixed bias,
/// relabeled through a permutation, and a fraction of classes is redrawn
/// from scratch. `identity` disables all of it (control runs).
struct ShiftSpec {
  double rotation_deg = 30.0;
  double bias_scale = 0.5;
  double redraw_fraction = 0.5;
  bool identity = false;
};

enum class Split { pretrain_train, pretrain_test, downstream_train, downstream_test };

/// Class-prototype sequence classification task with a controlled
/// distribution shift. All draws are deterministic in (seed, split, index).
struct SyntheticTask {
  uint64_t seed = 0;
  int64_t classes = 10;
  int64_t seq_len = 16;
  int64_t input_width = 64;
  double sigma = 0.3;
  ShiftSpec shift;

  std::vector<Tensor> pretrain_prototypes;    // [classes] x [T, d]
  std::vector<Tensor> downstream_prototypes;  // [classes] x [T, d]

  static SyntheticTask make(uint64_t seed, int64_t classes = 10, int64_t seq_len = 16,
                            int64_t input_width = 64, double sigma = 0.3, ShiftSpec shift = {});
};

struct Dataset {
  Tensor inputs;  // [N, T, d]
  std::vector<int64_t> labels;
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

Dataset generate_dataset(const SyntheticTask& task, Split split, int64_t size);

// ---- optimizer -------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Decoupled-weight-decay Adam over the trainable subset of the given
/// parameters. Frozen variables are filtered out up front, so stepping can
/// never move them.
class AdamW {
 public:
  AdamW(const std::vector<Var>& params, AdamWConfig cfg = {});

  void step(double lr);
  void zero_grad();
  int64_t step_count() const { return t_; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

// ---- schedule ----------------------------------------------------------------

struct Schedule {
  double base_lr = 0.005;
  int64_t warmup_epochs = 10;
  int64_t total_epochs = 50;
};

/// Linear warmup from 0 to base_lr over the warmup epochs, then cosine
/// decay to 0 at the final step; steps past the end clamp to 0.
double lr_at_step(const Schedule& schedule, int64_t step, int64_t steps_per_epoch);

// ---- training loops ------------------------------------------------------------

struct EpochMetrics {
  int64_t epoch;
  double lr;
  double train_loss;
  double train_acc;
  double test_acc;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double final_test_acc = 0.0;
  double final_train_acc = 0.0;
};

struct TrainOptions {
  int64_t batch_size = 32;
  Schedule schedule;
  uint64_t seed = 0;
  AdamWConfig adamw;
};

using ForwardFn = std::function<Var(Var)>;

double evaluate_accuracy(const ForwardFn& forward, const Dataset& data, int64_t batch_size = 128);

/// Shared minibatch loop: shuffles per epoch, steps AdamW on the mean
/// cross-entropy, records one metrics row per epoch. Aborts with
/// diagnostics if the loss turns non-finite.
TrainResult train_loop(const ForwardFn& forward, const std::vector<Var>& params,
                       const Dataset& train, const Dataset& test, const TrainOptions& opts);

/// Trains every backbone parameter on the pretraining distribution.
TrainResult pretrain_backbone(Backbone& bb, const SyntheticTask& task, const TrainOptions& opts,
                              int64_t train_size = 2000, int64_t test_size = 1000);

/// Fine-tunes head + tuners of a composed model on the downstream
/// distribution; verifies afterwards that frozen values are bit-identical.
TrainResult finetune_petl(ComposedModel& model, const SyntheticTask& task, const TrainOptions& opts,
                          int64_t train_size = 2000, int64_t test_size = 1000);

/// finetune_petl with zero tuners: only the classifier head trains.
TrainResult linear_probe(const Backbone& frozen, const SyntheticTask& task, const TrainOptions& opts,
                         int64_t train_size = 2000, int64_t test_size = 1000);

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history);

}  // namespace utuning
