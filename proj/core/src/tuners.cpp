#include "utuning/tuners.hpp"

#include <cmath>

namespace utuning {

PrefixTuner PrefixTuner::init(int64_t m, int64_t heads, int64_t head_width, Rng& rng,
                              const std::string& name_prefix) {
  if (m < 0) throw ConfigError("prefix length must be >= 0");
  PrefixTuner t;
  t.prefix_len = m;
  t.heads = heads;
  t.head_width = head_width;
  if (m > 0) {
    t.k_pre = variable(rng.normal_tensor({heads, m, head_width}, 0.02), true, name_prefix + ".k_pre");
    t.v_pre = variable(rng.normal_tensor({heads, m, head_width}, 0.02), true, name_prefix + ".v_pre");
  }
  return t;
}

PromptTuner PromptTuner::init(int64_t n, int64_t width, Rng& rng, const std::string& name_prefix) {
  if (n < 0) throw ConfigError("prompt count must be >= 0");
  PromptTuner t;
  t.count = n;
  t.width = width;
  if (n > 0) {
    t.tokens = variable(rng.normal_tensor({n, width}, 0.02), true, name_prefix + ".tokens");
  }
  return t;
}

AdapterTuner AdapterTuner::init(int64_t r, int64_t width, Rng& rng, const std::string& name_prefix,
                                bool with_bias) {
  if (r < 1) throw ConfigError("adapter bottleneck must be >= 1");
  if (r >= width) throw ConfigError("adapter bottleneck " + std::to_string(r) +
                                    " must be smaller than width " + std::to_string(width));
  AdapterTuner t;
  t.bottleneck = r;
  t.width = width;
  double bound = 1.0 / std::sqrt(static_cast<double>(width));
  t.w_down = variable(rng.uniform_tensor({width, r}, -bound, bound), true, name_prefix + ".w_down");
  // Zero up-projection makes a freshly attached adapter an exact no-op.
  t.w_up = variable(Tensor::zeros({r, width}), true, name_prefix + ".w_up");
  if (with_bias) {
    t.b_down = variable(Tensor::zeros({r}), true, name_prefix + ".b_down");
    t.b_up = variable(Tensor::zeros({width}), true, name_prefix + ".b_up");
  }
  return t;
}

namespace {

Var attention(Var q, Var k, Var v, double logit_scale) {
  return matmul(softmax(scale(matmul_nt(q, k), logit_scale), -1), v);
}

Var slice_head(const Var& packed, int64_t head, int64_t m, int64_t head_width) {
  return reshape(narrow(packed, 0, head, 1), {m, head_width});
}

Var match_batch(Var t, const Var& like) {
  if (like->value.rank() == 3) return broadcast_batch(std::move(t), like->value.dim(0));
  return t;
}

Var ones_like_rows(const Var& v) { return constant(Tensor::ones(v->value.shape())); }

void check_prefix(const AttentionProjections& proj, const PrefixTuner& tuner) {
  if (tuner.prefix_len == 0) return;
  if (tuner.heads != proj.heads || tuner.head_width != proj.head_width()) {
    throw DimensionError("prefix tuner laid out for " + std::to_string(tuner.heads) + "x" +
                         std::to_string(tuner.head_width) + " heads, projections need " +
                         std::to_string(proj.heads) + "x" + std::to_string(proj.head_width()));
  }
}

void check_prompt(const AttentionProjections& proj, const PromptTuner& tuner) {
  if (tuner.count == 0) return;
  if (tuner.width != proj.width) {
    throw DimensionError("prompt tuner width " + std::to_string(tuner.width) +
                         " does not match projections width " + std::to_string(proj.width));
  }
}

}  // namespace

Var lambda_gate(Var q, Var k_base, Var k_extra, double logit_scale, GateOverride ov) {
  Var l_base = scale(matmul_nt(q, k_base), logit_scale);
  Var l_extra = scale(matmul_nt(q, k_extra), logit_scale);
  if (ov == GateOverride::force_zero) {
    Shape s = l_base->value.shape();
    s.pop_back();
    return constant(Tensor::zeros(s));
  }
  // One shift per query row, shared by both exponential groups: the ratio
  // is invariant to it, so it carries no gradient.
  Tensor shift = rowmax_value2(l_base->value, l_extra->value);
  Var e_base = exp(sub_rowwise(l_base, shift));
  Var e_extra = exp(sub_rowwise(l_extra, shift));
  Var lam = div(sum_last(e_extra), add(sum_last(e_base), sum_last(e_extra)));
  if (ov == GateOverride::corrupt) lam = scale(lam, 0.98);
  return lam;
}

Var prefix_original(Var x, const AttentionProjections& proj, const PrefixTuner& tuner) {
  check_prefix(proj, tuner);
  if (tuner.prefix_len == 0) return multi_head_attention(std::move(x), proj);
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, proj.w_q);
  Var k = matmul(x, proj.w_k);
  Var v = matmul(x, proj.w_v);
  std::vector<Var> heads;
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var vh = narrow(v, -1, h * dh, dh);
    Var kp = match_batch(slice_head(tuner.k_pre, h, tuner.prefix_len, dh), x);
    Var vp = match_batch(slice_head(tuner.v_pre, h, tuner.prefix_len, dh), x);
    heads.push_back(attention(qh, concat({kp, kh}, -2), concat({vp, vh}, -2), sc));
  }
  Var merged = proj.heads == 1 ? heads[0] : concat(heads, -1);
  return matmul(merged, proj.w_o);
}

Var prefix_parallel(Var x, const AttentionProjections& proj, const PrefixTuner& tuner,
                    GateOverride ov) {
  check_prefix(proj, tuner);
  if (tuner.prefix_len == 0) return multi_head_attention(std::move(x), proj);
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, proj.w_q);
  Var k = matmul(x, proj.w_k);
  Var v = matmul(x, proj.w_v);
  std::vector<Var> heads;
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var vh = narrow(v, -1, h * dh, dh);
    Var kp = match_batch(slice_head(tuner.k_pre, h, tuner.prefix_len, dh), x);
    Var vp = match_batch(slice_head(tuner.v_pre, h, tuner.prefix_len, dh), x);
    Var a_orig = attention(qh, kh, vh, sc);
    Var a_pre = attention(qh, kp, vp, sc);
    Var lam = lambda_gate(qh, kh, kp, sc, ov);
    heads.push_back(add(scale_rows(a_orig, sub(ones_like_rows(lam), lam)), scale_rows(a_pre, lam)));
  }
  Var merged = proj.heads == 1 ? heads[0] : concat(heads, -1);
  return matmul(merged, proj.w_o);
}

Var prompt_original(Var x, const AttentionProjections& proj, const PromptTuner& tuner,
                    bool discard_prompts) {
  check_prompt(proj, tuner);
  if (tuner.count == 0) return multi_head_attention(std::move(x), proj);
  int64_t t_len = x->value.dim(-2);
  Var xp = match_batch(tuner.tokens, x);
  Var full = multi_head_attention(concat({x, xp}, -2), proj);
  if (!discard_prompts) return full;
  return narrow(full, -2, 0, t_len);
}

Var prompt_parallel(Var x, const AttentionProjections& proj, const PromptTuner& tuner,
                    bool discard_prompts, GateOverride ov) {
  check_prompt(proj, tuner);
  if (tuner.count == 0) return multi_head_attention(std::move(x), proj);
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, proj.w_q);
  Var k = matmul(x, proj.w_k);
  Var v = matmul(x, proj.w_v);
  // Prompts project through the same frozen weights as the input tokens.
  Var q_pro = matmul(tuner.tokens, proj.w_q);
  Var k_pro = matmul(tuner.tokens, proj.w_k);
  Var v_pro = matmul(tuner.tokens, proj.w_v);
  std::vector<Var> heads;
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var vh = narrow(v, -1, h * dh, dh);
    Var kph = match_batch(narrow(k_pro, -1, h * dh, dh), x);
    Var vph = match_batch(narrow(v_pro, -1, h * dh, dh), x);
    Var lam = lambda_gate(qh, kh, kph, sc, ov);
    Var seg_tok = add(scale_rows(attention(qh, kh, vh, sc), sub(ones_like_rows(lam), lam)),
                      scale_rows(attention(qh, kph, vph, sc), lam));
    if (discard_prompts) {
      heads.push_back(seg_tok);
      continue;
    }
    Var qph = match_batch(narrow(q_pro, -1, h * dh, dh), x);
    Var beta = lambda_gate(qph, kph, kh, sc, ov);
    Var seg_pro = add(scale_rows(attention(qph, kph, vph, sc), sub(ones_like_rows(beta), beta)),
                      scale_rows(attention(qph, kh, vh, sc), beta));
    heads.push_back(concat({seg_tok, seg_pro}, -2));
  }
  Var merged = proj.heads == 1 ? heads[0] : concat(heads, -1);
  return matmul(merged, proj.w_o);
}

Var prefix_parallel_delta(Var x, const AttentionProjections& proj, const PrefixTuner& tuner,
                          GateOverride ov) {
  check_prefix(proj, tuner);
  if (tuner.prefix_len == 0) {
    Tensor z(x->value.shape());
    return constant(std::move(z));
  }
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, proj.w_q);
  Var k = matmul(x, proj.w_k);
  Var v = matmul(x, proj.w_v);
  std::vector<Var> heads;
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var vh = narrow(v, -1, h * dh, dh);
    Var kp = match_batch(slice_head(tuner.k_pre, h, tuner.prefix_len, dh), x);
    Var vp = match_batch(slice_head(tuner.v_pre, h, tuner.prefix_len, dh), x);
    Var lam = lambda_gate(qh, kh, kp, sc, ov);
    heads.push_back(scale_rows(sub(attention(qh, kp, vp, sc), attention(qh, kh, vh, sc)), lam));
  }
  Var merged = proj.heads == 1 ? heads[0] : concat(heads, -1);
  return matmul(merged, proj.w_o);
}

Var prompt_parallel_delta(Var x, const AttentionProjections& proj, const PromptTuner& tuner,
                          GateOverride ov) {
  check_prompt(proj, tuner);
  if (tuner.count == 0) {
    Tensor z(x->value.shape());
    return constant(std::move(z));
  }
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, proj.w_q);
  Var k = matmul(x, proj.w_k);
  Var v = matmul(x, proj.w_v);
  Var k_pro = matmul(tuner.tokens, proj.w_k);
  Var v_pro = matmul(tuner.tokens, proj.w_v);
  std::vector<Var> heads;
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var vh = narrow(v, -1, h * dh, dh);
    Var kph = match_batch(narrow(k_pro, -1, h * dh, dh), x);
    Var vph = match_batch(narrow(v_pro, -1, h * dh, dh), x);
    Var lam = lambda_gate(qh, kh, kph, sc, ov);
    heads.push_back(scale_rows(sub(attention(qh, kph, vph, sc), attention(qh, kh, vh, sc)), lam));
  }
  Var merged = proj.heads == 1 ? heads[0] : concat(heads, -1);
  return matmul(merged, proj.w_o);
}

Var prefix_delta_standalone(Var x, Var w_q, Var w_k, Var w_v, const PrefixTuner& tuner,
                            GateOverride ov) {
  if (tuner.prefix_len == 0) {
    Tensor z(x->value.shape());
    return constant(std::move(z));
  }
  const int64_t dh = tuner.head_width;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, w_q);
  Var k = matmul(x, w_k);
  Var v = matmul(x, w_v);
  Var kp = match_batch(slice_head(tuner.k_pre, 0, tuner.prefix_len, dh), x);
  Var vp = match_batch(slice_head(tuner.v_pre, 0, tuner.prefix_len, dh), x);
  Var lam = lambda_gate(q, k, kp, sc, ov);
  return scale_rows(sub(attention(q, kp, vp, sc), attention(q, k, v, sc)), lam);
}

Var prompt_delta_standalone(Var x, Var w_q, Var w_k, Var w_v, const PromptTuner& tuner,
                            GateOverride ov) {
  if (tuner.count == 0) {
    Tensor z(x->value.shape());
    return constant(std::move(z));
  }
  const int64_t dh = tuner.width;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, w_q);
  Var k = matmul(x, w_k);
  Var v = matmul(x, w_v);
  Var kp = match_batch(matmul(tuner.tokens, w_k), x);
  Var vp = match_batch(matmul(tuner.tokens, w_v), x);
  Var lam = lambda_gate(q, k, kp, sc, ov);
  return scale_rows(sub(attention(q, kp, vp, sc), attention(q, k, v, sc)), lam);
}

namespace {

Var adapter_delta(Var x, const AdapterTuner& tuner) {
  if (x->value.dim(-1) != tuner.width) {
    throw DimensionError("adapter width mismatch: input " + shape_str(x->value.shape()) +
                         " vs tuner width " + std::to_string(tuner.width));
  }
  Var hidden = matmul(x, tuner.w_down);
  if (tuner.b_down) hidden = add(hidden, tuner.b_down);
  hidden = apply_activation(hidden, tuner.act);
  Var delta = matmul(hidden, tuner.w_up);
  if (tuner.b_up) delta = add(delta, tuner.b_up);
  return delta;
}

}  // namespace

Var adapter_sequential(Var ffn_out, const AdapterTuner& tuner) {
  return add(ffn_out, adapter_delta(ffn_out, tuner));
}

Var adapter_parallel(Var x, const AdapterTuner& tuner) { return adapter_delta(std::move(x), tuner); }

GateVector compute_lambda_gate(const Tensor& x, const AttentionProjections& proj,
                               const PrefixTuner& tuner) {
  GateVector out;
  int64_t t_len = x.dim(-2);
  out.lambda = Tensor::zeros({proj.heads, t_len});
  if (tuner.prefix_len == 0) return out;
  check_prefix(proj, tuner);
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var xv = constant(x);
  Var q = matmul(xv, proj.w_q);
  Var k = matmul(xv, proj.w_k);
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var kp = slice_head(tuner.k_pre, h, tuner.prefix_len, dh);
    Tensor lam = lambda_gate(qh, kh, kp, sc)->value;
    for (int64_t t = 0; t < t_len; ++t) out.lambda[h * t_len + t] = lam[t];
  }
  return out;
}

GateVector compute_prompt_gates(const Tensor& x, const AttentionProjections& proj,
                                const PromptTuner& tuner) {
  GateVector out;
  int64_t t_len = x.dim(-2);
  out.lambda = Tensor::zeros({proj.heads, t_len});
  if (tuner.count == 0) return out;
  check_prompt(proj, tuner);
  out.beta = Tensor::zeros({proj.heads, tuner.count});
  out.has_beta = true;
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var xv = constant(x);
  Var q = matmul(xv, proj.w_q);
  Var k = matmul(xv, proj.w_k);
  Var q_pro = matmul(tuner.tokens, proj.w_q);
  Var k_pro = matmul(tuner.tokens, proj.w_k);
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var qph = narrow(q_pro, -1, h * dh, dh);
    Var kph = narrow(k_pro, -1, h * dh, dh);
    Tensor lam = lambda_gate(qh, kh, kph, sc)->value;
    Tensor beta = lambda_gate(qph, kph, kh, sc)->value;
    for (int64_t t = 0; t < t_len; ++t) out.lambda[h * t_len + t] = lam[t];
    for (int64_t n = 0; n < tuner.count; ++n) out.beta[h * tuner.count + n] = beta[n];
  }
  return out;
}

std::string scaling_kind_name(ScalingKind k) {
  switch (k) {
    case ScalingKind::direct:
      return "direct";
    case ScalingKind::scalar:
      return "scalar";
    case ScalingKind::channel_wise:
      return "channel_wise";
    case ScalingKind::input_dependent:
      return "input_dependent";
  }
  throw ContractError("unknown scaling kind");
}

ScalingKind scaling_kind_from_name(const std::string& name) {
  if (name == "direct") return ScalingKind::direct;
  if (name == "scalar") return ScalingKind::scalar;
  if (name == "channel_wise") return ScalingKind::channel_wise;
  if (name == "input_dependent") return ScalingKind::input_dependent;
  throw ConfigError("unknown scaling kind '" + name +
                    "' (expected direct, scalar, channel_wise or input_dependent)");
}

Scaling Scaling::make(ScalingKind kind, int64_t width, Rng& rng, const std::string& name_prefix) {
  Scaling s;
  s.kind = kind;
  switch (kind) {
    case ScalingKind::direct:
      break;
    case ScalingKind::scalar:
      s.s = variable(Tensor::scalar(1.0), true, name_prefix + ".s");
      break;
    case ScalingKind::channel_wise:
      s.s = variable(Tensor::ones({width}), true, name_prefix + ".s");
      break;
    case ScalingKind::input_dependent: {
      int64_t hidden = std::max<int64_t>(1, width / 4);
      // Near-zero init keeps the sigmoid gate at ~0.5.
      s.g1 = variable(rng.normal_tensor({width, hidden}, 0.01), true, name_prefix + ".g1");
      s.g2 = variable(rng.normal_tensor({hidden, width}, 0.01), true, name_prefix + ".g2");
      break;
    }
  }
  return s;
}

Var Scaling::apply(Var delta, Var x) const {
  switch (kind) {
    case ScalingKind::direct:
      return delta;
    case ScalingKind::scalar:
    case ScalingKind::channel_wise:
      return mul(delta, s);
    case ScalingKind::input_dependent: {
      Var gate = sigmoid(matmul(relu(matmul(std::move(x), g1)), g2));
      return mul(std::move(delta), std::move(gate));
    }
  }
  throw ContractError("unknown scaling kind");
}

Var apply_scaling(Var delta, const Scaling& strategy, Var x) {
  return strategy.apply(std::move(delta), std::move(x));
}

}  // namespace utuning
