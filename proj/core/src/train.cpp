#include "utuning/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace utuning {

namespace {

// Rotation by theta in the plane spanned by orthonormal u, v, applied to
// each row of a [T, d] prototype.
Tensor rotate_rows(const Tensor& proto, const std::vector<double>& u, const std::vector<double>& v,
                   double theta) {
  int64_t t_len = proto.dim(0);
  int64_t d = proto.dim(1);
  Tensor out = proto;
  double c = std::cos(theta), s = std::sin(theta);
  for (int64_t t = 0; t < t_len; ++t) {
    const double* row = proto.data() + t * d;
    double pu = 0.0, pv = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      pu += row[j] * u[static_cast<size_t>(j)];
      pv += row[j] * v[static_cast<size_t>(j)];
    }
    double nu = c * pu - s * pv;
    double nv = s * pu + c * pv;
    double* orow = out.data() + t * d;
    for (int64_t j = 0; j < d; ++j) {
      orow[j] += (nu - pu) * u[static_cast<size_t>(j)] + (nv - pv) * v[static_cast<size_t>(j)];
    }
  }
  return out;
}

std::vector<double> normalize(std::vector<double> x) {
  double n = 0.0;
  for (double v : x) n += v * v;
  n = std::sqrt(n);
  for (double& v : x) v /= n;
  return x;
}

}  // namespace

SyntheticTask SyntheticTask::make(uint64_t seed, int64_t classes, int64_t seq_len,
                                  int64_t input_width, double sigma, ShiftSpec shift) {
  SyntheticTask task;
  task.seed = seed;
  task.classes = classes;
  task.seq_len = seq_len;
  task.input_width = input_width;
  task.sigma = sigma;
  task.shift = shift;

  Rng base(seed);
  for (int64_t c = 0; c < classes; ++c) {
    Rng r = base.split(1000 + static_cast<uint64_t>(c));
    task.pretrain_prototypes.push_back(r.normal_tensor({seq_len, input_width}));
  }

  if (shift.identity) {
    task.downstream_prototypes = task.pretrain_prototypes;
    return task;
  }

  Rng shift_rng = base.split(2000);
  std::vector<double> u(static_cast<size_t>(input_width)), v(static_cast<size_t>(input_width));
  for (auto& x : u) x = shift_rng.normal();
  for (auto& x : v) x = shift_rng.normal();
  u = normalize(std::move(u));
  // Gram-Schmidt v against u.
  double dot = 0.0;
  for (size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
  for (size_t i = 0; i < u.size(); ++i) v[i] -= dot * u[i];
  v = normalize(std::move(v));

  std::vector<double> bias(static_cast<size_t>(input_width));
  for (auto& x : bias) x = shift_rng.normal(0.0, shift.bias_scale);

  std::vector<int64_t> perm(static_cast<size_t>(classes));
  std::iota(perm.begin(), perm.end(), 0);
  shift_rng.shuffle(perm);

  std::vector<int64_t> redraw_order(static_cast<size_t>(classes));
  std::iota(redraw_order.begin(), redraw_order.end(), 0);
  shift_rng.shuffle(redraw_order);
  int64_t n_redraw = static_cast<int64_t>(std::llround(shift.redraw_fraction * classes));
  std::vector<bool> redrawn(static_cast<size_t>(classes), false);
  for (int64_t i = 0; i < n_redraw; ++i) redrawn[static_cast<size_t>(redraw_order[i])] = true;

  double theta = shift.rotation_deg * std::numbers::pi / 180.0;
  for (int64_t c = 0; c < classes; ++c) {
    Tensor proto;
    if (redrawn[static_cast<size_t>(c)]) {
      Rng r = base.split(3000 + static_cast<uint64_t>(c));
      proto = r.normal_tensor({seq_len, input_width});
    } else {
      proto = task.pretrain_prototypes[static_cast<size_t>(perm[static_cast<size_t>(c)])];
    }
    proto = rotate_rows(proto, u, v, theta);
    for (int64_t i = 0; i < proto.numel(); ++i) {
      proto[i] += bias[static_cast<size_t>(i % input_width)];
    }
    task.downstream_prototypes.push_back(std::move(proto));
  }
  return task;
}

Dataset generate_dataset(const SyntheticTask& task, Split split, int64_t size) {
  if (size < 1) throw ConfigError("dataset size must be >= 1");
  bool downstream = split == Split::downstream_train || split == Split::downstream_test;
  const auto& protos = downstream ? task.downstream_prototypes : task.pretrain_prototypes;

  Dataset ds;
  ds.inputs = Tensor::zeros({size, task.seq_len, task.input_width});
  ds.labels.resize(static_cast<size_t>(size));
  Rng base(task.seed);
  uint64_t split_id = static_cast<uint64_t>(split);
  int64_t per_sample = task.seq_len * task.input_width;
  for (int64_t i = 0; i < size; ++i) {
    int64_t label = i % task.classes;
    ds.labels[static_cast<size_t>(i)] = label;
    Rng r = base.split((split_id + 7) * 0x100000000ull + static_cast<uint64_t>(i));
    const Tensor& proto = protos[static_cast<size_t>(label)];
    double* dst = ds.inputs.data() + i * per_sample;
    for (int64_t j = 0; j < per_sample; ++j) dst[j] = proto[j] + task.sigma * r.normal();
  }
  return ds;
}

// ---- optimizer ---------------------------------------------------------------

AdamW::AdamW(const std::vector<Var>& params, AdamWConfig cfg) : cfg_(cfg) {
  for (const Var& p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    p->ensure_grad();
    double* w = p->value.data();
    const double* g = p->grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (int64_t j = 0; j < p->value.numel(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      w[j] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (Var& p : params_) {
    p->ensure_grad();
    p->grad.fill(0.0);
  }
}

// ---- schedule ------------------------------------------------------------------

double lr_at_step(const Schedule& schedule, int64_t step, int64_t steps_per_epoch) {
  if (step < 0) throw ContractError("lr_at_step: negative step");
  int64_t warmup = schedule.warmup_epochs * steps_per_epoch;
  int64_t total = schedule.total_epochs * steps_per_epoch;
  if (step >= total) return 0.0;
  if (warmup > 0 && step < warmup) {
    return schedule.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  double phase = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

// ---- loops -----------------------------------------------------------------------

namespace {

// Batch slice [start, start+b) of a dataset whose samples may be sequences
// ([N, T, d]) or flat feature rows ([N, d]).
Tensor slice_batch(const Dataset& data, int64_t start, int64_t b) {
  Shape shape = data.inputs.shape();
  shape[0] = b;
  int64_t per_sample = data.inputs.numel() / data.size();
  return Tensor(std::move(shape),
                std::vector<double>(data.inputs.data() + start * per_sample,
                                    data.inputs.data() + (start + b) * per_sample));
}

}  // namespace

double evaluate_accuracy(const ForwardFn& forward, const Dataset& data, int64_t batch_size) {
  NoGradGuard no_grad;
  int64_t n = data.size();
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t b = std::min(batch_size, n - start);
    Tensor logits = forward(constant(slice_batch(data, start, b)))->value;
    int64_t classes = logits.dim(-1);
    for (int64_t i = 0; i < b; ++i) {
      const double* row = logits.data() + i * classes;
      int64_t best = 0;
      for (int64_t c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (best == data.labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainResult train_loop(const ForwardFn& forward, const std::vector<Var>& params,
                       const Dataset& train, const Dataset& test, const TrainOptions& opts) {
  AdamW opt(params, opts.adamw);
  int64_t n = train.size();
  int64_t batch = std::min(opts.batch_size, n);
  int64_t steps_per_epoch = n / batch;
  int64_t per_sample = train.inputs.numel() / n;
  Shape batch_shape = train.inputs.shape();
  batch_shape[0] = batch;

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = Rng(opts.seed).split(0xe9);

  TrainResult result;
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < opts.schedule.total_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int64_t seen = 0, correct = 0;
    double lr_first = lr_at_step(opts.schedule, global_step, steps_per_epoch);
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      Tensor batch_x(batch_shape);
      std::vector<int64_t> batch_y(static_cast<size_t>(batch));
      for (int64_t i = 0; i < batch; ++i) {
        int64_t src = order[static_cast<size_t>(s * batch + i)];
        std::copy(train.inputs.data() + src * per_sample, train.inputs.data() + (src + 1) * per_sample,
                  batch_x.data() + i * per_sample);
        batch_y[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
      }
      Var logits = forward(constant(std::move(batch_x)));
      Var loss = cross_entropy_mean(logits, batch_y);
      double loss_v = loss->value[0];
      if (!std::isfinite(loss_v)) {
        throw NumericError("training diverged: loss " + std::to_string(loss_v) + " at epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(s));
      }
      loss_sum += loss_v * static_cast<double>(batch);
      const Tensor& lv = logits->value;
      int64_t classes = lv.dim(-1);
      for (int64_t i = 0; i < batch; ++i) {
        const double* row = lv.data() + i * classes;
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c) {
          if (row[c] > row[best]) best = c;
        }
        if (best == batch_y[static_cast<size_t>(i)]) ++correct;
      }
      seen += batch;
      opt.zero_grad();
      backward(loss);
      opt.step(lr_at_step(opts.schedule, global_step, steps_per_epoch));
      ++global_step;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr_first;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    m.test_acc = evaluate_accuracy(forward, test);
    result.history.push_back(m);
  }
  if (!result.history.empty()) {
    result.final_test_acc = result.history.back().test_acc;
    result.final_train_acc = result.history.back().train_acc;
  }
  return result;
}

TrainResult pretrain_backbone(Backbone& bb, const SyntheticTask& task, const TrainOptions& opts,
                              int64_t train_size, int64_t test_size) {
  Dataset train = generate_dataset(task, Split::pretrain_train, train_size);
  Dataset test = generate_dataset(task, Split::pretrain_test, test_size);
  ForwardFn forward = [&bb](Var x) { return forward_classify(std::move(x), bb); };
  return train_loop(forward, bb.parameters(), train, test, opts);
}

namespace {

std::vector<std::pair<std::string, Tensor>> frozen_snapshot(const ComposedModel& model) {
  std::vector<std::pair<std::string, Tensor>> snap;
  for (const auto& [name, v] : model.named_parameters()) {
    if (!v->trainable) snap.emplace_back(name, v->value);
  }
  return snap;
}

}  // namespace

TrainResult finetune_petl(ComposedModel& model, const SyntheticTask& task, const TrainOptions& opts,
                          int64_t train_size, int64_t test_size) {
  auto snapshot = frozen_snapshot(model);
  Dataset train = generate_dataset(task, Split::downstream_train, train_size);
  Dataset test = generate_dataset(task, Split::downstream_test, test_size);
  ForwardFn forward = [&model](Var x) { return model.forward(std::move(x)); };
  bool prev_stop = stop_grad_at_frozen();
  set_stop_grad_at_frozen(true);
  TrainResult result;
  try {
    result = train_loop(forward, model.trainable_parameters(), train, test, opts);
  } catch (...) {
    set_stop_grad_at_frozen(prev_stop);
    throw;
  }
  set_stop_grad_at_frozen(prev_stop);
  auto named = model.named_parameters();
  size_t k = 0;
  for (const auto& [name, v] : named) {
    if (v->trainable) continue;
    if (!(v->value == snapshot[k].second)) {
      throw ContractError("frozen parameter '" + name + "' changed during fine-tuning");
    }
    ++k;
  }
  return result;
}

TrainResult linear_probe(const Backbone& frozen, const SyntheticTask& task, const TrainOptions& opts,
                         int64_t train_size, int64_t test_size) {
  if (!frozen.head_only_trainable()) {
    throw ContractError("linear_probe requires a frozen backbone (head-only trainable)");
  }
  // The frozen feature extractor never moves during probing, so pooled
  // features are computed once and the head trains on them directly.
  std::vector<std::pair<std::string, Tensor>> snapshot;
  for (const auto& [name, v] : frozen.named_parameters()) {
    if (!v->trainable) snapshot.emplace_back(name, v->value);
  }
  auto featurize = [&](const Dataset& raw) {
    NoGradGuard no_grad;
    Dataset out;
    out.labels = raw.labels;
    out.inputs = Tensor::zeros({raw.size(), frozen.config.width});
    const int64_t eval_batch = 128;
    for (int64_t start = 0; start < raw.size(); start += eval_batch) {
      int64_t b = std::min(eval_batch, raw.size() - start);
      Shape shape = raw.inputs.shape();
      shape[0] = b;
      int64_t per = raw.inputs.numel() / raw.size();
      Tensor batch(shape, std::vector<double>(raw.inputs.data() + start * per,
                                              raw.inputs.data() + (start + b) * per));
      Var feats = forward_features(constant(std::move(batch)), frozen);
      Tensor pooled = pool_features(feats, frozen, /*batched=*/true)->value;
      std::copy(pooled.data(), pooled.data() + pooled.numel(),
                out.inputs.data() + start * frozen.config.width);
    }
    return out;
  };
  Dataset train = featurize(generate_dataset(task, Split::downstream_train, train_size));
  Dataset test = featurize(generate_dataset(task, Split::downstream_test, test_size));
  ForwardFn head_forward = [&frozen](Var x) {
    return add(matmul(std::move(x), frozen.head_w), frozen.head_b);
  };
  TrainResult result =
      train_loop(head_forward, {frozen.head_w, frozen.head_b}, train, test, opts);
  size_t k = 0;
  for (const auto& [name, v] : frozen.named_parameters()) {
    if (v->trainable) continue;
    if (!(v->value == snapshot[k].second)) {
      throw ContractError("frozen parameter '" + name + "' changed during linear probing");
    }
    ++k;
  }
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write metrics file: " + path);
  out << "epoch,lr,train_loss,train_acc,test_acc\n";
  out.precision(12);
  for (const EpochMetrics& m : history) {
    out << m.epoch << "," << m.lr << "," << m.train_loss << "," << m.train_acc << "," << m.test_acc
        << "\n";
  }
}

}  // namespace utuning
