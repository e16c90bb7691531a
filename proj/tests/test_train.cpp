#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "utuning/train.hpp"

using namespace utuning;

namespace {

SyntheticTask tiny_task(uint64_t seed = 0, double sigma = 0.3) {
  return SyntheticTask::make(seed, /*classes=*/4, /*seq_len=*/4, /*input_width=*/8, sigma);
}

Backbone tiny_backbone(uint64_t seed = 50) {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.ffn_width = 32;
  cfg.seq_len = 4;
  cfg.classes = 4;
  cfg.input_width = 8;
  Rng rng(seed);
  return Backbone::random_init(cfg, rng);
}

}  // namespace

TEST_CASE("dataset generation is deterministic and class-balanced") {
  SyntheticTask task = tiny_task();
  Dataset a = generate_dataset(task, Split::downstream_train, 101);
  Dataset b = generate_dataset(task, Split::downstream_train, 101);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);

  std::vector<int64_t> hist(4, 0);
  for (int64_t l : a.labels) hist[static_cast<size_t>(l)]++;
  int64_t lo = *std::min_element(hist.begin(), hist.end());
  int64_t hi = *std::max_element(hist.begin(), hist.end());
  CHECK(hi - lo <= 1);

  // Different splits draw different noise.
  Dataset c = generate_dataset(task, Split::downstream_test, 101);
  CHECK(!(a.inputs == c.inputs));
}

TEST_CASE("zero noise reproduces prototypes exactly") {
  SyntheticTask task = tiny_task(3, 0.0);
  Dataset d = generate_dataset(task, Split::pretrain_train, 8);
  for (int64_t i = 0; i < d.size(); ++i) {
    const Tensor& proto = task.pretrain_prototypes[static_cast<size_t>(d.labels[i])];
    for (int64_t j = 0; j < proto.numel(); ++j) {
      CHECK(d.inputs[i * proto.numel() + j] == proto[j]);
    }
  }
}

TEST_CASE("identity shift keeps downstream prototypes equal to pretrain ones") {
  ShiftSpec id;
  id.identity = true;
  SyntheticTask task = SyntheticTask::make(1, 4, 4, 8, 0.3, id);
  for (size_t c = 0; c < 4; ++c) {
    CHECK(task.downstream_prototypes[c] == task.pretrain_prototypes[c]);
  }
  SyntheticTask shifted = tiny_task(1);
  bool any_diff = false;
  for (size_t c = 0; c < 4; ++c) {
    any_diff = any_diff || !(shifted.downstream_prototypes[c] == shifted.pretrain_prototypes[c]);
  }
  CHECK(any_diff);
}

TEST_CASE("AdamW decoupled decay is exact with zero gradients") {
  Var w = variable(Tensor::row({2.0, -3.0}), true, "w");
  AdamWConfig cfg;
  cfg.weight_decay = 0.05;
  AdamW opt({w}, cfg);
  opt.zero_grad();
  double lr = 0.1;
  Tensor before = w->value;
  opt.step(lr);
  for (int64_t i = 0; i < 2; ++i) {
    CHECK(w->value[i] == before[i] * (1.0 - lr * cfg.weight_decay));
  }
}

TEST_CASE("AdamW ignores frozen parameters entirely") {
  Var frozen = variable(Tensor::row({1.0}), false, "frozen");
  Var live = variable(Tensor::row({1.0}), true, "live");
  AdamW opt({frozen, live});
  frozen->ensure_grad();
  live->ensure_grad();
  frozen->grad.fill(5.0);
  live->grad.fill(5.0);
  opt.step(0.1);
  CHECK(frozen->value[0] == 1.0);
  CHECK(live->value[0] != 1.0);
}

TEST_CASE("learning-rate schedule hits the documented anchors") {
  Schedule s;
  s.base_lr = 0.004;
  s.warmup_epochs = 10;
  s.total_epochs = 50;
  int64_t spe = 20;
  CHECK(lr_at_step(s, 0, spe) == 0.0);
  CHECK(lr_at_step(s, 5 * spe, spe) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(lr_at_step(s, 10 * spe, spe) == doctest::Approx(0.004).epsilon(1e-12));
  int64_t halfway = 10 * spe + (50 - 10) * spe / 2;
  CHECK(lr_at_step(s, halfway, spe) == doctest::Approx(0.002).epsilon(1e-12));
  CHECK(lr_at_step(s, 50 * spe, spe) == 0.0);
  CHECK(lr_at_step(s, 50 * spe + 123, spe) == 0.0);
  // Continuity at the warmup boundary.
  double just_before = lr_at_step(s, 10 * spe - 1, spe);
  CHECK(std::fabs(just_before - s.base_lr) < s.base_lr / (10 * spe) + 1e-12);
}

TEST_CASE("one big-batch step equals one summed-then-averaged accumulation step") {
  SyntheticTask task = tiny_task(7);
  Dataset data = generate_dataset(task, Split::downstream_train, 8);

  auto build = [&] {
    Backbone bb = tiny_backbone(51);
    freeze_backbone(bb);
    Rng rng(52);
    return compose(bb, named_preset("default_dual", 2, 3), rng);
  };
  ComposedModel m1 = build();
  ComposedModel m2 = build();

  auto slice = [&](int64_t start, int64_t count) {
    int64_t per = data.inputs.numel() / data.size();
    Tensor x({count, 4, 8},
             std::vector<double>(data.inputs.data() + start * per,
                                 data.inputs.data() + (start + count) * per));
    std::vector<int64_t> y(data.labels.begin() + start, data.labels.begin() + start + count);
    return std::make_pair(constant(std::move(x)), y);
  };

  // Randomize the shared-teacher head so gradients are not symmetric.
  Rng jitter(53);
  for (auto& [name, v] : m1.named_parameters()) {
    if (!v->trainable) continue;
    for (int64_t i = 0; i < v->value.numel(); ++i) {
      double nudge = jitter.normal(0.0, 0.05);
      v->value[i] += nudge;
    }
  }
  // Mirror the same values into the second model.
  auto n1 = m1.named_parameters();
  auto n2 = m2.named_parameters();
  for (size_t i = 0; i < n1.size(); ++i) n2[i].second->value = n1[i].second->value;

  AdamW opt1(m1.trainable_parameters());
  AdamW opt2(m2.trainable_parameters());

  auto [x_full, y_full] = slice(0, 8);
  opt1.zero_grad();
  backward(cross_entropy_mean(m1.forward(x_full), y_full));
  opt1.step(0.01);

  opt2.zero_grad();
  auto [x_a, y_a] = slice(0, 4);
  auto [x_b, y_b] = slice(4, 4);
  backward(scale(cross_entropy_mean(m2.forward(x_a), y_a), 0.5));
  backward(scale(cross_entropy_mean(m2.forward(x_b), y_b), 0.5));
  opt2.step(0.01);

  auto p1 = m1.named_parameters();
  auto p2 = m2.named_parameters();
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(max_abs_diff(p1[i].second->value, p2[i].second->value) < 1e-10);
  }
}

TEST_CASE("zero-init dual adapter scores exactly like a linear probe at step zero") {
  Backbone bb = tiny_backbone(60);
  freeze_backbone(bb);
  Rng rng(61);
  ComposedModel dual = compose(bb, named_preset("default_dual", 2, 3), rng);
  ComposedModel probe = compose(bb, named_preset("linear_probe", 2), rng);
  SyntheticTask task = tiny_task(9);
  Dataset test = generate_dataset(task, Split::downstream_test, 64);
  double acc_dual = evaluate_accuracy([&](Var x) { return dual.forward(std::move(x)); }, test);
  double acc_probe = evaluate_accuracy([&](Var x) { return probe.forward(std::move(x)); }, test);
  CHECK(acc_dual == acc_probe);
}

TEST_CASE("short fine-tune runs deterministically and reduces the loss") {
  SyntheticTask task = tiny_task(11);
  auto run = [&] {
    Backbone bb = tiny_backbone(62);
    freeze_backbone(bb);
    Rng rng(63);
    ComposedModel model = compose(bb, named_preset("default_dual", 2, 3), rng);
    TrainOptions opts;
    opts.seed = 5;
    opts.batch_size = 16;
    opts.schedule.base_lr = 0.01;
    opts.schedule.warmup_epochs = 1;
    opts.schedule.total_epochs = 4;
    return finetune_petl(model, task, opts, 128, 64);
  };
  TrainResult r1 = run();
  TrainResult r2 = run();
  REQUIRE(r1.history.size() == 4);
  CHECK(r1.history.back().train_loss < r1.history.front().train_loss);
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
    CHECK(r1.history[i].test_acc == r2.history[i].test_acc);
  }
}

TEST_CASE("training aborts with diagnostics when the loss turns non-finite") {
  SyntheticTask task = tiny_task(13);
  Backbone bb = tiny_backbone(64);
  freeze_backbone(bb);
  Rng rng(65);
  ComposedModel model = compose(bb, named_preset("default_dual", 2, 3), rng);
  bb.head_w->value.fill(std::numeric_limits<double>::quiet_NaN());
  TrainOptions opts;
  opts.schedule.total_epochs = 1;
  CHECK_THROWS_AS(finetune_petl(model, task, opts, 64, 32), NumericError);
}

TEST_CASE("metrics CSV has the documented header and one row per epoch") {
  std::vector<EpochMetrics> hist = {{0, 0.0, 2.0, 0.1, 0.2}, {1, 0.001, 1.5, 0.4, 0.5}};
  std::string path = "test_metrics.csv";
  write_metrics_csv(path, hist);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,lr,train_loss,train_acc,test_acc");
  int rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 2);
  std::remove(path.c_str());
}

TEST_CASE("linear probe trains the head only and keeps the backbone frozen") {
  SyntheticTask task = tiny_task(15);
  Backbone bb = tiny_backbone(66);
  freeze_backbone(bb);
  std::vector<Tensor> frozen_before;
  for (auto& [name, v] : bb.named_parameters()) {
    if (!v->trainable) frozen_before.push_back(v->value);
  }
  TrainOptions opts;
  opts.schedule.base_lr = 0.01;
  opts.schedule.warmup_epochs = 1;
  opts.schedule.total_epochs = 2;
  linear_probe(bb, task, opts, 64, 32);
  size_t k = 0;
  for (auto& [name, v] : bb.named_parameters()) {
    if (!v->trainable) {
      CHECK(v->value == frozen_before[k]);
      ++k;
    }
  }
}
