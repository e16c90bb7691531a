#include "utuning/verify.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "utuning/gradcheck.hpp"
#include "utuning/serialize.hpp"
#include "utuning/train.hpp"
#include "utuning/version.hpp"

namespace utuning {

using nlohmann::json;

int64_t Report::passed() const {
  int64_t n = 0;
  for (const auto& c : cases) n += c.pass ? 1 : 0;
  return n;
}

int64_t Report::failed() const { return static_cast<int64_t>(cases.size()) - passed(); }

std::string Report::to_json_string() const {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  j["version"] = version;
  j["wall_time_ms"] = wall_time_ms;
  j["cases"] = json::array();
  for (const auto& c : cases) {
    json cj = {{"name", c.name},
               {"metric", c.metric},
               {"tolerance", c.tolerance},
               {"pass", c.pass}};
    if (!c.detail.empty()) cj["detail"] = c.detail;
    j["cases"].push_back(cj);
  }
  j["summary"] = {{"total", cases.size()},
                  {"passed", passed()},
                  {"failed", failed()},
                  {"pass", pass()}};
  return j.dump(2);
}

void Report::write_json(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write report: " + path);
  out << to_json_string() << "\n";
}

std::string Report::to_text() const {
  std::ostringstream os;
  for (const auto& c : cases) {
    os << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << "  metric=" << c.metric
       << " tol=" << c.tolerance;
    if (!c.detail.empty()) os << "  (" << c.detail << ")";
    os << "\n";
  }
  os << (pass() ? "PASS" : "FAIL") << ": " << passed() << "/" << cases.size() << " cases, "
     << wall_time_ms << " ms\n";
  return os.str();
}

namespace {

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

AttentionProjections random_projections(Rng& rng, int64_t d, int64_t heads) {
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionProjections p;
  p.heads = heads;
  p.width = d;
  p.w_q = constant(rng.uniform_tensor({d, d}, -bound, bound));
  p.w_k = constant(rng.uniform_tensor({d, d}, -bound, bound));
  p.w_v = constant(rng.uniform_tensor({d, d}, -bound, bound));
  p.w_o = constant(rng.uniform_tensor({d, d}, -bound, bound));
  return p;
}

// Concatenates two matrices with equal row counts along columns.
Tensor hcat(const Tensor& a, const Tensor& b) {
  int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out({rows, ca + cb});
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(a.data() + r * ca, a.data() + (r + 1) * ca, out.data() + r * (ca + cb));
    std::copy(b.data() + r * cb, b.data() + (r + 1) * cb, out.data() + r * (ca + cb) + ca);
  }
  return out;
}

struct GateCheck {
  double recon_err = 0.0;  // worst |joint softmax - gated recombination|
  bool in_open_interval = true;
};

// Verifies that per-query gates rebuild the joint softmax row:
// the row over [extra_logits ; base_logits] (extra group first iff
// extra_first) must equal [g * softmax(extra), (1-g) * softmax(base)].
GateCheck check_gate_reconstruction(const Tensor& base_logits, const Tensor& extra_logits,
                                    const double* gate_row, bool extra_first) {
  GateCheck out;
  Tensor joint = extra_first ? softmax_value(hcat(extra_logits, base_logits), -1)
                             : softmax_value(hcat(base_logits, extra_logits), -1);
  Tensor sm_base = softmax_value(base_logits, -1);
  Tensor sm_extra = softmax_value(extra_logits, -1);
  int64_t rows = base_logits.dim(0);
  int64_t nb = base_logits.dim(1), ne = extra_logits.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    double g = gate_row[r];
    if (!(g > 0.0 && g < 1.0)) out.in_open_interval = false;
    for (int64_t j = 0; j < ne; ++j) {
      double recon = g * sm_extra[r * ne + j];
      double joint_v = joint[r * (nb + ne) + (extra_first ? j : nb + j)];
      out.recon_err = std::max(out.recon_err, std::fabs(recon - joint_v));
    }
    for (int64_t j = 0; j < nb; ++j) {
      double recon = (1.0 - g) * sm_base[r * nb + j];
      double joint_v = joint[r * (nb + ne) + (extra_first ? ne + j : j)];
      out.recon_err = std::max(out.recon_err, std::fabs(recon - joint_v));
    }
  }
  return out;
}

struct CaseDims {
  int64_t t, d, heads, dim;
};

CaseDims sample_dims(Rng& rng) {
  const int64_t widths[] = {8, 16, 64};
  const int64_t heads[] = {1, 2, 4};
  const int64_t dims[] = {1, 4, 10};
  CaseDims c;
  c.t = rng.uniform_int(1, 8);
  c.d = widths[rng.uniform_int(0, 2)];
  c.heads = heads[rng.uniform_int(0, 2)];
  c.dim = dims[rng.uniform_int(0, 2)];
  return c;
}

void equivalence_prefix_case(Rng rng, int idx, const EquivalenceOptions& opts, Report& report) {
  CaseDims dims = sample_dims(rng);
  const int64_t dh = dims.d / dims.heads;
  Tensor x = rng.normal_tensor({dims.t, dims.d});
  AttentionProjections proj = random_projections(rng, dims.d, dims.heads);
  PrefixTuner tuner;
  tuner.prefix_len = dims.dim;
  tuner.heads = dims.heads;
  tuner.head_width = dh;
  tuner.k_pre = constant(rng.normal_tensor({dims.heads, dims.dim, dh}));
  tuner.v_pre = constant(rng.normal_tensor({dims.heads, dims.dim, dh}));

  Tensor original = prefix_original(constant(x), proj, tuner)->value;
  Tensor parallel = prefix_parallel(constant(x), proj, tuner, opts.gate_override)->value;
  CaseResult cr;
  cr.name = "prefix_" + std::to_string(idx);
  cr.metric = max_abs_diff(original, parallel);
  cr.tolerance = opts.tol_prefix;
  cr.pass = cr.metric < cr.tolerance;
  cr.detail = "T=" + std::to_string(dims.t) + " d=" + std::to_string(dims.d) +
              " h=" + std::to_string(dims.heads) + " m=" + std::to_string(dims.dim);
  report.cases.push_back(cr);

  if (!opts.check_gates || opts.gate_override != GateOverride::none) return;
  GateVector gates = compute_lambda_gate(x, proj, tuner);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(constant(x), proj.w_q);
  Var k = matmul(constant(x), proj.w_k);
  double worst = 0.0;
  bool open_ok = true;
  for (int64_t h = 0; h < dims.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var kp = constant(Tensor({dims.dim, dh}, std::vector<double>(
                                                 tuner.k_pre->value.data() + h * dims.dim * dh,
                                                 tuner.k_pre->value.data() + (h + 1) * dims.dim * dh)));
    Tensor l_base = scale(matmul_nt(qh, kh), sc)->value;
    Tensor l_extra = scale(matmul_nt(qh, kp), sc)->value;
    GateCheck gc = check_gate_reconstruction(l_base, l_extra, gates.lambda.data() + h * dims.t,
                                             /*extra_first=*/true);
    worst = std::max(worst, gc.recon_err);
    open_ok = open_ok && gc.in_open_interval;
  }
  CaseResult gr;
  gr.name = "prefix_" + std::to_string(idx) + "/gate";
  gr.metric = worst;
  gr.tolerance = opts.tol_gate;
  gr.pass = gr.metric < gr.tolerance && open_ok;
  if (!open_ok) gr.detail = "lambda left (0,1)";
  report.cases.push_back(gr);
}

void equivalence_prompt_case(Rng rng, int idx, const EquivalenceOptions& opts, Report& report) {
  CaseDims dims = sample_dims(rng);
  const int64_t dh = dims.d / dims.heads;
  Tensor x = rng.normal_tensor({dims.t, dims.d});
  AttentionProjections proj = random_projections(rng, dims.d, dims.heads);
  PromptTuner tuner;
  tuner.count = dims.dim;
  tuner.width = dims.d;
  tuner.tokens = constant(rng.normal_tensor({dims.dim, dims.d}));

  double metric = 0.0;
  for (bool discard : {false, true}) {
    Tensor original = prompt_original(constant(x), proj, tuner, discard)->value;
    Tensor parallel = prompt_parallel(constant(x), proj, tuner, discard, opts.gate_override)->value;
    metric = std::max(metric, max_abs_diff(original, parallel));
  }
  CaseResult cr;
  cr.name = "prompt_" + std::to_string(idx);
  cr.metric = metric;
  cr.tolerance = opts.tol_prompt;
  cr.pass = cr.metric < cr.tolerance;
  cr.detail = "T=" + std::to_string(dims.t) + " d=" + std::to_string(dims.d) +
              " h=" + std::to_string(dims.heads) + " n=" + std::to_string(dims.dim);
  report.cases.push_back(cr);

  if (!opts.check_gates || opts.gate_override != GateOverride::none) return;
  GateVector gates = compute_prompt_gates(x, proj, tuner);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(constant(x), proj.w_q);
  Var k = matmul(constant(x), proj.w_k);
  Var q_pro = matmul(tuner.tokens, proj.w_q);
  Var k_pro = matmul(tuner.tokens, proj.w_k);
  double worst = 0.0;
  bool open_ok = true;
  for (int64_t h = 0; h < dims.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var qph = narrow(q_pro, -1, h * dh, dh);
    Var kph = narrow(k_pro, -1, h * dh, dh);
    // Token queries: joint keys are [tokens ; prompts], prompt mass = lambda.
    Tensor l_base = scale(matmul_nt(qh, kh), sc)->value;
    Tensor l_extra = scale(matmul_nt(qh, kph), sc)->value;
    GateCheck gc = check_gate_reconstruction(l_base, l_extra, gates.lambda.data() + h * dims.t,
                                             /*extra_first=*/false);
    // Prompt queries: base group is the prompt keys, original-key mass = beta.
    Tensor l_pp = scale(matmul_nt(qph, kph), sc)->value;
    Tensor l_po = scale(matmul_nt(qph, kh), sc)->value;
    GateCheck bc = check_gate_reconstruction(l_pp, l_po, gates.beta.data() + h * dims.dim,
                                             /*extra_first=*/false);
    worst = std::max({worst, gc.recon_err, bc.recon_err});
    open_ok = open_ok && gc.in_open_interval && bc.in_open_interval;
  }
  CaseResult gr;
  gr.name = "prompt_" + std::to_string(idx) + "/gate";
  gr.metric = worst;
  gr.tolerance = opts.tol_gate;
  gr.pass = gr.metric < gr.tolerance && open_ok;
  if (!open_ok) gr.detail = "lambda or beta left (0,1)";
  report.cases.push_back(gr);
}

void equivalence_adapter_case(Rng rng, int idx, const EquivalenceOptions& opts, Report& report) {
  const int64_t widths[] = {8, 16, 64};
  int64_t t = rng.uniform_int(1, 8);
  int64_t d = widths[rng.uniform_int(0, 2)];
  const int64_t rs[] = {1, 4, 10};
  int64_t r = rs[rng.uniform_int(0, 2)];
  while (r >= d) r = rs[rng.uniform_int(0, 1)];
  int64_t dff = d * rng.uniform_int(1, 2);
  double bound = 1.0 / std::sqrt(static_cast<double>(d));

  FfnWeights ffn;
  ffn.w1 = constant(rng.uniform_tensor({d, dff}, -bound, bound));
  ffn.b1 = constant(rng.normal_tensor({dff}, 0.1));
  ffn.w2 = constant(rng.uniform_tensor({dff, d}, -bound, bound));
  ffn.b2 = constant(rng.normal_tensor({d}, 0.1));
  ffn.act = rng.uniform_int(0, 1) == 0 ? Activation::gelu : Activation::relu;

  AdapterTuner tuner;
  tuner.bottleneck = r;
  tuner.width = d;
  tuner.w_down = constant(rng.uniform_tensor({d, r}, -bound, bound));
  tuner.w_up = constant(rng.normal_tensor({r, d}, 0.5));
  tuner.act = Activation::gelu;

  Tensor x = rng.normal_tensor({t, d});
  Var ffn_out_a = feed_forward(constant(x), ffn);
  Tensor route_sequential = adapter_sequential(ffn_out_a, tuner)->value;
  Var ffn_out_b = feed_forward(constant(x), ffn);
  Tensor route_parallel = add(ffn_out_b, adapter_parallel(ffn_out_b, tuner))->value;

  CaseResult cr;
  cr.name = "adapter_" + std::to_string(idx);
  cr.metric = max_abs_diff(route_sequential, route_parallel);
  cr.tolerance = opts.tol_adapter;
  cr.pass = cr.metric < cr.tolerance;
  cr.detail = "T=" + std::to_string(t) + " d=" + std::to_string(d) + " r=" + std::to_string(r);
  report.cases.push_back(cr);
}

}  // namespace

Report run_equivalence_suite(const EquivalenceOptions& opts) {
  Timer timer;
  Report report;
  report.command = "verify-equivalence";
  report.seed = opts.seed;
  report.version = UTUNING_VERSION;
  Rng root(opts.seed);
  if (opts.types.count(EquivalenceType::prefix)) {
    for (int i = 0; i < opts.cases_per_type; ++i) {
      equivalence_prefix_case(root.split(0x10000 + static_cast<uint64_t>(i)), i, opts, report);
    }
  }
  if (opts.types.count(EquivalenceType::prompt)) {
    for (int i = 0; i < opts.cases_per_type; ++i) {
      equivalence_prompt_case(root.split(0x20000 + static_cast<uint64_t>(i)), i, opts, report);
    }
  }
  if (opts.types.count(EquivalenceType::adapter)) {
    for (int i = 0; i < opts.cases_per_type; ++i) {
      equivalence_adapter_case(root.split(0x30000 + static_cast<uint64_t>(i)), i, opts, report);
    }
  }
  report.wall_time_ms = timer.ms();
  return report;
}

// ---- gradient suite ---------------------------------------------------------

BackboneConfig GradCheckOptions::grad_check_backbone() {
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.ffn_width = 32;
  cfg.seq_len = 6;
  cfg.classes = 3;
  cfg.input_width = 8;
  return cfg;
}

namespace {

struct FdOutcome {
  double rel_err = 0.0;
  std::string detail;
};

FdOutcome fd_check_param(const Var& param, const std::function<Var()>& loss_fn, double h) {
  Var loss = loss_fn();
  zero_grad({param});
  backward(loss);
  Tensor analytic = param->grad;
  Tensor numeric = finite_difference_gradient(
      [&](const Tensor& theta) {
        Tensor saved = param->value;
        param->value = theta;
        double out = loss_fn()->value[0];
        param->value = saved;
        return out;
      },
      param->value, h);
  FdOutcome out;
  int64_t worst_i = -1;
  for (int64_t i = 0; i < analytic.numel(); ++i) {
    double diff = std::fabs(analytic[i] - numeric[i]);
    if (diff <= 1e-7) continue;
    double rel = diff / std::max(std::fabs(analytic[i]), std::fabs(numeric[i]));
    if (rel > out.rel_err) {
      out.rel_err = rel;
      worst_i = i;
    }
  }
  if (worst_i >= 0) {
    std::ostringstream os;
    os << "worst coord " << worst_i << ": analytic " << analytic[worst_i] << " vs numeric "
       << numeric[worst_i];
    out.detail = os.str();
  }
  return out;
}

}  // namespace

Report run_gradient_suite(const GradCheckOptions& opts) {
  Timer timer;
  Report report;
  report.command = "grad-check";
  report.seed = opts.seed;
  report.version = UTUNING_VERSION;

  std::vector<UTuningConfig> configs = opts.configs;
  if (configs.empty()) {
    auto grid = enumerate_ablation_grid(opts.backbone.layers, opts.tuner_dim);
    configs.assign(grid.begin(), grid.begin() + 9);  // the 9 single-site configs
    for (const auto& cfg : grid) {
      if (cfg.name == "dual_p_adapter_p_adapter" || cfg.name == "scaling_input_dependent") {
        configs.push_back(cfg);
      }
    }
  }

  Rng root(opts.seed);
  for (size_t ci = 0; ci < configs.size(); ++ci) {
    const UTuningConfig& cfg = configs[ci];
    Rng rng = root.split(0x40000 + ci);
    Backbone bb = Backbone::random_init(opts.backbone, rng);
    freeze_backbone(bb);
    ComposedModel model = compose(bb, cfg, rng);

    // Zero-init adapters kill half the gradient paths; nudge every
    // trainable tensor to a generic point first.
    Rng jitter = rng.split(17);
    for (const auto& [name, v] : model.named_parameters()) {
      if (!v->trainable) continue;
      for (int64_t i = 0; i < v->value.numel(); ++i) v->value[i] += jitter.normal(0.0, 0.1);
    }

    Tensor batch_x = rng.normal_tensor({opts.batch, opts.backbone.seq_len, opts.backbone.input_width});
    std::vector<int64_t> labels(static_cast<size_t>(opts.batch));
    for (size_t i = 0; i < labels.size(); ++i) {
      labels[i] = static_cast<int64_t>(i) % opts.backbone.classes;
    }
    auto loss_fn = [&]() { return cross_entropy_mean(model.forward(constant(batch_x)), labels); };

    for (const auto& [name, v] : model.named_parameters()) {
      if (!v->trainable) continue;
      FdOutcome fd = fd_check_param(v, loss_fn, opts.fd_step);
      CaseResult cr;
      cr.name = cfg.name + "/" + name;
      cr.metric = fd.rel_err;
      cr.tolerance = opts.tolerance;
      cr.pass = fd.rel_err < opts.tolerance;
      if (!cr.pass) cr.detail = fd.detail;
      report.cases.push_back(cr);
    }

    // Frozen tensors must survive optimizer steps bit-exactly, even though
    // they receive gradients here (stop-grad mode is off).
    std::vector<Tensor> frozen_before;
    std::vector<std::string> frozen_names;
    for (const auto& [name, v] : model.named_parameters()) {
      if (!v->trainable) {
        frozen_before.push_back(v->value);
        frozen_names.push_back(name);
      }
    }
    AdamW opt(model.trainable_parameters());
    for (int64_t s = 0; s < opts.adamw_steps; ++s) {
      Var loss = loss_fn();
      opt.zero_grad();
      backward(loss);
      opt.step(1e-3);
    }
    bool frozen_ok = true;
    std::string offender;
    size_t k = 0;
    for (const auto& [name, v] : model.named_parameters()) {
      if (v->trainable) continue;
      if (!(v->value == frozen_before[k])) {
        frozen_ok = false;
        offender = name;
        break;
      }
      ++k;
    }
    CaseResult fr;
    fr.name = cfg.name + "/frozen_after_" + std::to_string(opts.adamw_steps) + "_steps";
    fr.metric = frozen_ok ? 0.0 : 1.0;
    fr.tolerance = 0.5;
    fr.pass = frozen_ok;
    if (!frozen_ok) fr.detail = "frozen tensor changed: " + offender;
    report.cases.push_back(fr);
  }
  report.wall_time_ms = timer.ms();
  return report;
}

// ---- parameter counts ----------------------------------------------------------

Report run_param_count_report(uint64_t seed) {
  Timer timer;
  Report report;
  report.command = "count-params";
  report.seed = seed;
  report.version = UTUNING_VERSION;
  Rng rng(seed);

  auto push_exact = [&report](const std::string& name, int64_t got, int64_t want,
                              const std::string& detail = "") {
    CaseResult cr;
    cr.name = name;
    cr.metric = static_cast<double>(got - want);
    cr.tolerance = 0.5;
    cr.pass = got == want;
    cr.detail = detail.empty() ? ("count " + std::to_string(got)) : detail;
    report.cases.push_back(cr);
  };

  {
    BackboneConfig cfg = BackboneConfig::vitb16();
    Backbone bb = Backbone::random_init(cfg, rng);
    freeze_backbone(bb);
    int64_t head_only = count_trainable_params(bb);
    push_exact("vitb16_linear_probe_exact", head_only, 76900,
               "head = d*C + C = " + std::to_string(head_only));
    CaseResult rounded;
    rounded.name = "vitb16_linear_probe_reported";
    rounded.metric = std::fabs(static_cast<double>(head_only) / 1e6 - 0.07);
    rounded.tolerance = 0.01;
    rounded.pass = rounded.metric <= rounded.tolerance;
    rounded.detail = "0.0769M vs reported 0.07M";
    report.cases.push_back(rounded);

    ComposedModel deep = compose(bb, named_preset("deep_prompt", cfg.layers, 10), rng);
    int64_t total = count_trainable_params(deep);
    push_exact("vitb16_deep_prompt_exact", total, 169060,
               "L*n*d + head = " + std::to_string(total));
    CaseResult drounded;
    drounded.name = "vitb16_deep_prompt_reported";
    drounded.metric = std::fabs(static_cast<double>(total) / 1e6 - 0.17);
    drounded.tolerance = 0.01;
    drounded.pass = drounded.metric <= drounded.tolerance;
    drounded.detail = "0.169M vs reported 0.17M (n = 10 inferred)";
    report.cases.push_back(drounded);
  }

  for (int64_t layers : {2, 4, 6}) {
    for (int64_t n : {1, 5, 10}) {
      for (int64_t d : {16, 32, 64}) {
        BackboneConfig cfg;
        cfg.layers = layers;
        cfg.width = d;
        cfg.heads = 4;
        cfg.ffn_width = 2 * d;
        cfg.seq_len = 4;
        cfg.classes = 3;
        cfg.input_width = 8;
        Backbone bb = Backbone::random_init(cfg, rng);
        freeze_backbone(bb);
        ComposedModel model = compose(bb, named_preset("deep_prompt", layers, n), rng);
        int64_t prompt_params = 0;
        for (const auto& [name, v] : model.named_parameters()) {
          if (v->trainable && name.rfind("tuner.", 0) == 0) prompt_params += v->value.numel();
        }
        push_exact("prompt_formula_L" + std::to_string(layers) + "_n" + std::to_string(n) + "_d" +
                       std::to_string(d),
                   prompt_params, layers * n * d);
      }
    }
  }

  {
    // Desk-scale shape arithmetic: one adapter is 2*d*r, its channel-wise
    // scaling adds d.
    BackboneConfig cfg = BackboneConfig::desk();
    Backbone bb = Backbone::random_init(cfg, rng);
    freeze_backbone(bb);
    UTuningConfig single;
    single.name = "single_adapter_first_layer";
    single.layer_range = {0};
    single.specs = {TunerSpec{OpSite::mha, TunerKind::p_adapter, 10, ScalingKind::channel_wise}};
    ComposedModel model = compose(bb, single, rng);
    int64_t tuner_params = 0;
    for (const auto& [name, v] : model.named_parameters()) {
      if (v->trainable && name.rfind("tuner.", 0) == 0) tuner_params += v->value.numel();
    }
    push_exact("desk_single_adapter_r10", tuner_params, 2 * 64 * 10 + 64);
  }

  report.wall_time_ms = timer.ms();
  return report;
}

// ---- zero-init identity ----------------------------------------------------------

Report run_zero_init_suite(const ZeroInitOptions& opts) {
  Timer timer;
  Report report;
  report.command = "zero-init";
  report.seed = opts.seed;
  report.version = UTUNING_VERSION;

  Rng rng(opts.seed);
  BackboneConfig cfg = BackboneConfig::desk();
  Backbone bb = Backbone::random_init(cfg, rng);
  freeze_backbone(bb);

  std::vector<Tensor> batches;
  std::vector<Tensor> baseline;
  for (int64_t i = 0; i < opts.batches; ++i) {
    batches.push_back(rng.normal_tensor({opts.batch_size, cfg.seq_len, cfg.input_width}));
    baseline.push_back(forward_classify(constant(batches.back()), bb)->value);
  }

  NoGradGuard no_grad;
  for (const UTuningConfig& grid_cfg : enumerate_ablation_grid(cfg.layers, 10)) {
    Rng crng = rng.split(std::hash<std::string>{}(grid_cfg.name));
    ComposedModel model = compose(bb, grid_cfg, crng);

    bool all_adapter = !grid_cfg.specs.empty();
    for (const TunerSpec& s : grid_cfg.specs) {
      all_adapter = all_adapter && s.kind == TunerKind::p_adapter;
    }
    if (all_adapter) {
      double worst = 0.0;
      for (size_t i = 0; i < batches.size(); ++i) {
        worst = std::max(worst,
                         max_abs_diff(model.forward(constant(batches[i]))->value, baseline[i]));
      }
      CaseResult cr;
      cr.name = grid_cfg.name + "/zero_init_identity";
      cr.metric = worst;
      cr.tolerance = opts.tolerance;
      cr.pass = worst < opts.tolerance;
      report.cases.push_back(cr);
    }

    model.zero_deltas = true;
    double worst = 0.0;
    for (size_t i = 0; i < batches.size(); ++i) {
      worst =
          std::max(worst, max_abs_diff(model.forward(constant(batches[i]))->value, baseline[i]));
    }
    CaseResult cr;
    cr.name = grid_cfg.name + "/zero_delta_hook";
    cr.metric = worst;
    cr.tolerance = opts.tolerance;
    cr.pass = worst < opts.tolerance;
    report.cases.push_back(cr);
  }
  report.wall_time_ms = timer.ms();
  return report;
}

std::string param_group_table(const std::vector<std::pair<std::string, Var>>& named) {
  // Group tuner params as tuner.<layer>.<site>, everything else by its
  // first dotted segment.
  std::map<std::string, std::pair<int64_t, int64_t>> groups;  // trainable, frozen
  int64_t total_train = 0, total_frozen = 0;
  for (const auto& [name, v] : named) {
    std::string group = name;
    size_t first = name.find('.');
    if (name.rfind("tuner.", 0) == 0) {
      size_t second = name.find('.', 6);
      size_t third = second == std::string::npos ? std::string::npos : name.find('.', second + 1);
      group = name.substr(0, third);
    } else if (first != std::string::npos) {
      group = name.substr(0, first);
    }
    auto& slot = groups[group];
    if (v->trainable) {
      slot.first += v->value.numel();
      total_train += v->value.numel();
    } else {
      slot.second += v->value.numel();
      total_frozen += v->value.numel();
    }
  }
  std::ostringstream os;
  os << "group,trainable,frozen\n";
  for (const auto& [group, counts] : groups) {
    os << group << "," << counts.first << "," << counts.second << "\n";
  }
  os << "total," << total_train << "," << total_frozen << "\n";
  os << "total_millions," << static_cast<double>(total_train) / 1e6 << ","
     << static_cast<double>(total_frozen) / 1e6 << "\n";
  return os.str();
}

}  // namespace utuning
