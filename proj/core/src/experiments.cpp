#include "utuning/experiments.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

namespace utuning {

namespace {

void push_site_stats(std::vector<StatRow>& rows, int64_t layer, const std::string& site,
                     const Tensor& act) {
  int64_t d = act.dim(-1);
  int64_t n = act.numel() / d;  // batch * tokens
  const double* p = act.data();
  double mean = 0.0;
  for (int64_t i = 0; i < act.numel(); ++i) mean += p[i];
  mean /= static_cast<double>(act.numel());
  double var = 0.0;
  for (int64_t i = 0; i < act.numel(); ++i) var += (p[i] - mean) * (p[i] - mean);
  var /= static_cast<double>(act.numel());

  std::vector<double> ch_mean(static_cast<size_t>(d), 0.0), ch_var(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) ch_mean[static_cast<size_t>(j)] += p[i * d + j];
  }
  for (auto& v : ch_mean) v /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      double dev = p[i * d + j] - ch_mean[static_cast<size_t>(j)];
      ch_var[static_cast<size_t>(j)] += dev * dev;
    }
  }
  for (auto& v : ch_var) v /= static_cast<double>(n);

  auto minmax_mean = [](const std::vector<double>& v) {
    double lo = v[0], hi = v[0], sum = 0.0;
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
      sum += x;
    }
    return std::array<double, 3>{lo, sum / static_cast<double>(v.size()), hi};
  };
  auto mm = minmax_mean(ch_mean);
  auto vv = minmax_mean(ch_var);
  rows.push_back({layer, site, "mean", mean});
  rows.push_back({layer, site, "variance", var});
  rows.push_back({layer, site, "channel_mean_min", mm[0]});
  rows.push_back({layer, site, "channel_mean_avg", mm[1]});
  rows.push_back({layer, site, "channel_mean_max", mm[2]});
  rows.push_back({layer, site, "channel_var_min", vv[0]});
  rows.push_back({layer, site, "channel_var_avg", vv[1]});
  rows.push_back({layer, site, "channel_var_max", vv[2]});
}

}  // namespace

std::vector<StatRow> collect_layer_stats(const ComposedModel& model, const Dataset& data,
                                         int64_t batch_size) {
  NoGradGuard no_grad;
  int64_t b = std::min(batch_size, data.size());
  int64_t per_sample = data.inputs.numel() / data.size();
  Tensor batch({b, data.inputs.dim(1), data.inputs.dim(2)},
               std::vector<double>(data.inputs.data(), data.inputs.data() + b * per_sample));
  std::vector<ComposedModel::LayerTaps> taps;
  model.forward_with_taps(constant(std::move(batch)), &taps);
  std::vector<StatRow> rows;
  for (size_t layer = 0; layer < taps.size(); ++layer) {
    int64_t l = static_cast<int64_t>(layer);
    push_site_stats(rows, l, "mha_in", taps[layer].mha_in);
    push_site_stats(rows, l, "mha_out", taps[layer].mha_out);
    push_site_stats(rows, l, "ffn_in", taps[layer].ffn_in);
    push_site_stats(rows, l, "ffn_out", taps[layer].ffn_out);
    push_site_stats(rows, l, "block_out", taps[layer].block_out);
  }
  return rows;
}

void write_stats_csv(const std::string& path, const std::vector<StatRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write stats file: " + path);
  out << "layer,site,stat,value\n";
  out.precision(15);
  for (const StatRow& r : rows) {
    out << r.layer << "," << r.site << "," << r.stat << "," << r.value << "\n";
  }
}

double max_stat_diff(const std::vector<StatRow>& a, const std::vector<StatRow>& b) {
  if (a.size() != b.size()) throw ContractError("stat row sets differ in size");
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].layer != b[i].layer || a[i].site != b[i].site || a[i].stat != b[i].stat) {
      throw ContractError("stat row sets differ in layout at index " + std::to_string(i));
    }
    worst = std::max(worst, std::fabs(a[i].value - b[i].value));
  }
  return worst;
}

std::vector<GridRowResult> run_ablation_grid(const Backbone& frozen, const SyntheticTask& task,
                                             const GridRunOptions& opts) {
  Tensor head_w0 = frozen.head_w->value;
  Tensor head_b0 = frozen.head_b->value;

  TrainOptions topts;
  topts.batch_size = opts.batch_size;
  topts.schedule = opts.schedule;
  if (opts.epochs > 0) topts.schedule.total_epochs = opts.epochs;
  topts.seed = opts.seed;

  std::vector<GridRowResult> rows;
  for (const UTuningConfig& cfg : enumerate_ablation_grid(frozen.config.layers, opts.tuner_dim)) {
    GridRowResult row;
    row.name = cfg.name;
    frozen.head_w->value = head_w0;
    frozen.head_b->value = head_b0;
    try {
      Rng rng = Rng(opts.seed).split(std::hash<std::string>{}(cfg.name));
      ComposedModel model = compose(frozen, cfg, rng);
      row.params = count_trainable_params(model);
      TrainResult result = finetune_petl(model, task, topts, opts.train_size, opts.test_size);
      row.first_train_loss = result.history.front().train_loss;
      row.last_train_loss = result.history.back().train_loss;
      row.final_test_acc = result.final_test_acc;
      row.ok = true;
      if (!opts.out_dir.empty()) {
        write_metrics_csv(opts.out_dir + "/" + cfg.name + ".csv", result.history);
      }
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  frozen.head_w->value = head_w0;
  frozen.head_b->value = head_b0;
  return rows;
}

void write_grid_summary_csv(const std::string& path, const std::vector<GridRowResult>& rows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write grid summary: " + path);
  out << "config,params,first_train_loss,last_train_loss,final_test_acc,status\n";
  out.precision(12);
  for (const GridRowResult& r : rows) {
    out << r.name << "," << r.params << "," << r.first_train_loss << "," << r.last_train_loss << ","
        << r.final_test_acc << "," << (r.ok ? "ok" : ("error: " + r.error)) << "\n";
  }
}

}  // namespace utuning
