// Command-line surface for the tuning library: equivalence certification,
// gradient checks, parameter counting, desk-scale training and the ablation
// grid. Every command accepts --seed, --precision and --out, writes a JSON
// report, and exits 0 (pass), 1 (verification failure) or 2 (bad config).

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "utuning/experiments.hpp"
#include "utuning/serialize.hpp"
#include "utuning/train.hpp"
#include "utuning/verify.hpp"
#include "utuning/version.hpp"

using namespace utuning;
namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
  uint64_t seed = 42;
  std::string precision = "f64";
  std::string out_dir = "out";
  std::string config_file;
};

void add_globals(CLI::App* cmd, GlobalArgs& g) {
  cmd->add_option("--seed", g.seed, "Deterministic seed");
  cmd->add_option("--precision", g.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--out", g.out_dir, "Output directory for reports and artifacts");
  cmd->add_option("--config", g.config_file, "Tuning configuration JSON file");
}

void apply_precision(const GlobalArgs& g, bool require_f64) {
  if (g.precision == "f32") {
    if (require_f64) {
      throw ConfigError("this command verifies exact identities and requires --precision f64");
    }
    set_precision(Precision::f32);
  } else {
    set_precision(Precision::f64);
  }
}

std::string ensure_out_dir(const GlobalArgs& g) {
  fs::create_directories(g.out_dir);
  return g.out_dir;
}

int finish(const Report& report, const GlobalArgs& g) {
  std::cout << report.to_text();
  std::string path = ensure_out_dir(g) + "/" + report.command + "_report.json";
  report.write_json(path);
  std::cout << "report: " << path << "\n";
  return report.pass() ? 0 : 1;
}

Backbone load_backbone(const std::string& checkpoint, uint64_t seed) {
  Rng rng(seed);
  Backbone bb = Backbone::random_init(BackboneConfig::desk(), rng);
  if (!checkpoint.empty()) load_checkpoint_into(checkpoint, bb.named_parameters());
  return bb;
}

UTuningConfig resolve_config(const GlobalArgs& g, const std::string& preset, int64_t layers,
                             int64_t dim) {
  if (!g.config_file.empty()) return UTuningConfig::load_file(g.config_file);
  return named_preset(preset, layers, dim);
}

Report training_report(const std::string& command, uint64_t seed, const TrainResult& result) {
  Report report;
  report.command = command;
  report.seed = seed;
  report.version = UTUNING_VERSION;
  CaseResult cr;
  cr.name = "final_test_acc";
  cr.metric = result.final_test_acc;
  cr.tolerance = 0.0;
  cr.pass = true;
  report.cases.push_back(cr);
  CaseResult tr;
  tr.name = "final_train_acc";
  tr.metric = result.final_train_acc;
  tr.tolerance = 0.0;
  tr.pass = true;
  report.cases.push_back(tr);
  return report;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient tuning toolkit"};
  app.require_subcommand(1);

  // verify-equivalence
  GlobalArgs eq_g;
  int eq_cases = 100;
  std::vector<std::string> eq_types;
  bool break_gate = false;
  auto* eq = app.add_subcommand("verify-equivalence",
                                "Certify original vs parallel tuner forms numerically");
  add_globals(eq, eq_g);
  eq->add_option("--cases", eq_cases, "Randomized cases per tuner type");
  eq->add_option("--types", eq_types, "Subset of {prefix,prompt,adapter}")->delimiter(',');
  eq->add_flag("--break-gate", break_gate,
               "Corrupt the softmax-mass gate (negative control; the suite must fail)");

  // grad-check
  GlobalArgs gc_g;
  auto* gc = app.add_subcommand("grad-check",
                                "Analytic vs central-difference gradients for the tuner grid");
  add_globals(gc, gc_g);

  // count-params
  GlobalArgs cp_g;
  std::string cp_backbone = "desk";
  std::string cp_preset = "default_dual";
  int64_t cp_dim = 10;
  auto* cp = app.add_subcommand("count-params", "Trainable/frozen parameter accounting");
  add_globals(cp, cp_g);
  cp->add_option("--backbone", cp_backbone, "desk or vitb16");
  cp->add_option("--preset", cp_preset, "Named tuning preset");
  cp->add_option("--dim", cp_dim, "Tuner dimension (r, m or n)");

  // pretrain
  GlobalArgs pt_g;
  int64_t pt_epochs = 30;
  double pt_lr = 0.001;
  uint64_t pt_task_seed = 0;
  auto* pt = app.add_subcommand("pretrain", "Train the desk backbone on the pretraining split");
  add_globals(pt, pt_g);
  pt->add_option("--epochs", pt_epochs, "Training epochs");
  pt->add_option("--lr", pt_lr, "Base learning rate");
  pt->add_option("--task-seed", pt_task_seed, "Synthetic task seed");

  // train
  GlobalArgs tr_g;
  std::string tr_checkpoint;
  std::string tr_preset = "default_dual";
  int64_t tr_epochs = 50;
  double tr_lr = 0.005;
  uint64_t tr_task_seed = 0;
  int64_t tr_dim = 10;
  auto* tr = app.add_subcommand("train", "Fine-tune a composed model on the downstream split");
  add_globals(tr, tr_g);
  tr->add_option("--checkpoint", tr_checkpoint, "Pretrained backbone checkpoint")->required();
  tr->add_option("--preset", tr_preset, "Named tuning preset (ignored when --config is given)");
  tr->add_option("--epochs", tr_epochs, "Training epochs");
  tr->add_option("--lr", tr_lr, "Base learning rate");
  tr->add_option("--task-seed", tr_task_seed, "Synthetic task seed");
  tr->add_option("--dim", tr_dim, "Tuner dimension for presets");

  // run-grid
  GlobalArgs gr_g;
  std::string gr_checkpoint;
  bool gr_pretrain = false;
  int64_t gr_epochs = 50;
  double gr_lr = 0.005;
  uint64_t gr_task_seed = 0;
  auto* gr = app.add_subcommand("run-grid", "Fine-tune all 25 ablation-grid configs");
  add_globals(gr, gr_g);
  gr->add_option("--checkpoint", gr_checkpoint, "Pretrained backbone checkpoint");
  gr->add_flag("--pretrain", gr_pretrain, "Pretrain first if no checkpoint is given");
  gr->add_option("--epochs", gr_epochs, "Epochs per config (2 = smoke mode)");
  gr->add_option("--lr", gr_lr, "Base learning rate");
  gr->add_option("--task-seed", gr_task_seed, "Synthetic task seed");

  // export-stats
  GlobalArgs es_g;
  std::string es_checkpoint;
  std::string es_preset = "linear_probe";
  std::string es_split = "downstream_test";
  int64_t es_batch = 128;
  uint64_t es_task_seed = 0;
  auto* es = app.add_subcommand("export-stats",
                                "Per-layer activation statistics at the five tap sites");
  add_globals(es, es_g);
  es->add_option("--checkpoint", es_checkpoint, "Backbone or composed-model checkpoint")->required();
  es->add_option("--preset", es_preset, "Tuning preset matching the checkpoint");
  es->add_option("--split", es_split,
                 "pretrain_train | pretrain_test | downstream_train | downstream_test");
  es->add_option("--batch", es_batch, "Batch size for the statistics pass");
  es->add_option("--task-seed", es_task_seed, "Synthetic task seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*eq) {
      apply_precision(eq_g, /*require_f64=*/true);
      set_numeric_checks(true);
      EquivalenceOptions opts;
      opts.seed = eq_g.seed;
      opts.cases_per_type = eq_cases;
      opts.gate_override = break_gate ? GateOverride::corrupt : GateOverride::none;
      if (!eq_types.empty()) {
        opts.types.clear();
        for (const std::string& t : eq_types) {
          if (t == "prefix") {
            opts.types.insert(EquivalenceType::prefix);
          } else if (t == "prompt") {
            opts.types.insert(EquivalenceType::prompt);
          } else if (t == "adapter") {
            opts.types.insert(EquivalenceType::adapter);
          } else {
            throw ConfigError("unknown equivalence type '" + t + "'");
          }
        }
      }
      return finish(run_equivalence_suite(opts), eq_g);
    }

    if (*gc) {
      apply_precision(gc_g, /*require_f64=*/true);
      set_numeric_checks(true);
      GradCheckOptions opts;
      opts.seed = gc_g.seed;
      if (!gc_g.config_file.empty()) {
        UTuningConfig cfg = UTuningConfig::load_file(gc_g.config_file);
        // Rescale onto the compact check backbone.
        BackboneConfig bb = GradCheckOptions::grad_check_backbone();
        for (auto& spec : cfg.specs) spec.dim = std::min<int64_t>(spec.dim, opts.tuner_dim);
        for (auto& l : cfg.layer_range) l = std::min<int64_t>(l, bb.layers - 1);
        std::sort(cfg.layer_range.begin(), cfg.layer_range.end());
        cfg.layer_range.erase(std::unique(cfg.layer_range.begin(), cfg.layer_range.end()),
                              cfg.layer_range.end());
        opts.configs = {cfg};
      }
      return finish(run_gradient_suite(opts), gc_g);
    }

    if (*cp) {
      apply_precision(cp_g, /*require_f64=*/false);
      Rng rng(cp_g.seed);
      BackboneConfig bc = BackboneConfig::by_name(cp_backbone);
      Backbone bb = Backbone::random_init(bc, rng);
      freeze_backbone(bb);
      UTuningConfig cfg = resolve_config(cp_g, cp_preset, bc.layers, cp_dim);
      ComposedModel model = compose(bb, cfg, rng);
      std::cout << param_group_table(model.named_parameters());
      if (cp_backbone == "vitb16") {
        return finish(run_param_count_report(cp_g.seed), cp_g);
      }
      Report report;
      report.command = "count-params";
      report.seed = cp_g.seed;
      report.version = UTUNING_VERSION;
      CaseResult cr;
      cr.name = cfg.name + "/trainable_total";
      cr.metric = static_cast<double>(count_trainable_params(model));
      cr.tolerance = 0.0;
      cr.pass = true;
      cr.detail = "stable shape arithmetic";
      report.cases.push_back(cr);
      return finish(report, cp_g);
    }

    if (*pt) {
      apply_precision(pt_g, /*require_f64=*/false);
      std::string out = ensure_out_dir(pt_g);
      SyntheticTask task = SyntheticTask::make(pt_task_seed);
      Rng rng(pt_g.seed);
      Backbone bb = Backbone::random_init(BackboneConfig::desk(), rng);
      TrainOptions opts;
      opts.seed = pt_g.seed;
      opts.schedule.base_lr = pt_lr;
      opts.schedule.total_epochs = pt_epochs;
      opts.schedule.warmup_epochs = std::min<int64_t>(10, pt_epochs / 3);
      TrainResult result = pretrain_backbone(bb, task, opts);
      save_checkpoint(out + "/backbone.utnt", bb.named_parameters());
      write_metrics_csv(out + "/pretrain_metrics.csv", result.history);
      std::cout << "final pretrain train_acc=" << result.final_train_acc
                << " test_acc=" << result.final_test_acc << "\n";
      return finish(training_report("pretrain", pt_g.seed, result), pt_g);
    }

    if (*tr) {
      apply_precision(tr_g, /*require_f64=*/false);
      std::string out = ensure_out_dir(tr_g);
      SyntheticTask task = SyntheticTask::make(tr_task_seed);
      Backbone bb = load_backbone(tr_checkpoint, 0);
      freeze_backbone(bb);
      UTuningConfig cfg = resolve_config(tr_g, tr_preset, bb.config.layers, tr_dim);
      Rng rng(tr_g.seed);
      ComposedModel model = compose(bb, cfg, rng);
      TrainOptions opts;
      opts.seed = tr_g.seed;
      opts.schedule.base_lr = tr_lr;
      opts.schedule.total_epochs = tr_epochs;
      TrainResult result = finetune_petl(model, task, opts);
      write_metrics_csv(out + "/" + cfg.name + "_metrics.csv", result.history);
      save_checkpoint(out + "/model.utnt", model.named_parameters());
      std::cout << "config=" << cfg.name << " trainable=" << count_trainable_params(model)
                << " final test_acc=" << result.final_test_acc << "\n";
      return finish(training_report("train", tr_g.seed, result), tr_g);
    }

    if (*gr) {
      apply_precision(gr_g, /*require_f64=*/false);
      std::string out = ensure_out_dir(gr_g);
      SyntheticTask task = SyntheticTask::make(gr_task_seed);
      Backbone bb;
      if (!gr_checkpoint.empty()) {
        bb = load_backbone(gr_checkpoint, 0);
      } else if (gr_pretrain) {
        Rng rng(gr_g.seed);
        bb = Backbone::random_init(BackboneConfig::desk(), rng);
        TrainOptions popts;
        popts.seed = gr_g.seed;
        popts.schedule.base_lr = 0.001;
        popts.schedule.total_epochs = 30;
        popts.schedule.warmup_epochs = 10;
        pretrain_backbone(bb, task, popts);
        save_checkpoint(out + "/backbone.utnt", bb.named_parameters());
      } else {
        throw ConfigError("run-grid needs --checkpoint or --pretrain");
      }
      freeze_backbone(bb);
      GridRunOptions opts;
      opts.seed = gr_g.seed;
      opts.epochs = gr_epochs;
      opts.schedule.base_lr = gr_lr;
      opts.out_dir = out;
      auto rows = run_ablation_grid(bb, task, opts);
      write_grid_summary_csv(out + "/grid_summary.csv", rows);

      Report report;
      report.command = "run-grid";
      report.seed = gr_g.seed;
      report.version = UTUNING_VERSION;
      for (const GridRowResult& r : rows) {
        CaseResult cr;
        cr.name = r.name;
        cr.metric = r.ok ? r.last_train_loss - r.first_train_loss : 0.0;
        cr.tolerance = 0.0;
        cr.pass = r.ok && r.last_train_loss < r.first_train_loss;
        cr.detail = r.ok ? ("params=" + std::to_string(r.params) +
                            " test_acc=" + std::to_string(r.final_test_acc))
                         : r.error;
        report.cases.push_back(cr);
      }
      return finish(report, gr_g);
    }

    if (*es) {
      apply_precision(es_g, /*require_f64=*/false);
      std::string out = ensure_out_dir(es_g);
      SyntheticTask task = SyntheticTask::make(es_task_seed);
      Split split;
      if (es_split == "pretrain_train") {
        split = Split::pretrain_train;
      } else if (es_split == "pretrain_test") {
        split = Split::pretrain_test;
      } else if (es_split == "downstream_train") {
        split = Split::downstream_train;
      } else if (es_split == "downstream_test") {
        split = Split::downstream_test;
      } else {
        throw ConfigError("unknown split '" + es_split + "'");
      }
      Backbone bb = load_backbone("", 0);
      freeze_backbone(bb);
      UTuningConfig cfg = resolve_config(es_g, es_preset, bb.config.layers, 10);
      Rng rng(es_g.seed);
      ComposedModel model = compose(bb, cfg, rng);
      load_checkpoint_into(es_checkpoint, model.named_parameters());
      Dataset data = generate_dataset(task, split, std::max<int64_t>(es_batch, 1));
      auto rows = collect_layer_stats(model, data, es_batch);
      std::string csv_path = out + "/stats_" + cfg.name + "_" + es_split + ".csv";
      write_stats_csv(csv_path, rows);
      std::cout << "wrote " << rows.size() << " stat rows to " << csv_path << "\n";
      Report report;
      report.command = "export-stats";
      report.seed = es_g.seed;
      report.version = UTUNING_VERSION;
      CaseResult cr;
      cr.name = "rows";
      cr.metric = static_cast<double>(rows.size());
      cr.tolerance = 0.0;
      cr.pass = rows.size() == static_cast<size_t>(bb.config.layers) * 5 * 8;
      report.cases.push_back(cr);
      return finish(report, es_g);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
