#pragma once

#include <optional>
#include <string>

#include "utuning/backbone.hpp"

namespace utuning {

/// Debug hooks for the softmax-mass gates. `force_zero` keeps only the
/// original-attention branch; `corrupt` perturbs the gate so equivalence
/// suites demonstrably fail (negative control).
enum class GateOverride { none, force_zero, corrupt };

/// Learnable key/value rows prepended inside attention, per head.
struct PrefixTuner {
  Var k_pre, v_pre;  // [heads, m, head_width]; null when m == 0
  int64_t prefix_len = 0;
  int64_t heads = 1;
  int64_t head_width = 0;

  static PrefixTuner init(int64_t m, int64_t heads, int64_t head_width, Rng& rng,
                          const std::string& name_prefix = "prefix");
};

/// Learnable latent tokens concatenated to the input sequence. Keys,
/// values and queries for the prompts are derived per call through the
/// frozen attention projections.
struct PromptTuner {
  Var tokens;  // [n, width]; null when n == 0
  int64_t count = 0;
  int64_t width = 0;

  static PromptTuner init(int64_t n, int64_t width, Rng& rng,
                          const std::string& name_prefix = "prompt");
};

/// Bottleneck module: down-project, nonlinearity, up-project.
struct AdapterTuner {
  Var w_down, w_up;  // width x r, r x width
  Var b_down, b_up;  // optional (null when bias-free)
  Activation act = Activation::gelu;
  int64_t bottleneck = 0;
  int64_t width = 0;

  static AdapterTuner init(int64_t r, int64_t width, Rng& rng,
                           const std::string& name_prefix = "adapter", bool with_bias = false);
};

/// Per-query softmax-mass gates, one row per head. `lambda` has shape
/// [heads, T_q]; `beta` (prompt segment only) has shape [heads, n].
struct GateVector {
  Tensor lambda;
  Tensor beta;
  bool has_beta = false;
};

// ---- attention-level tuning ops --------------------------------------------
// All ops accept x of shape [T, d] or [B, T, d] and mirror
// multi_head_attention's head slicing, logit scaling and output projection.

/// Attention over the keys/values with the prefix rows prepended.
Var prefix_original(Var x, const AttentionProjections& proj, const PrefixTuner& tuner);

/// Gated two-branch rewrite of prefix_original: per query,
/// (1 - lambda) * Attn(Q,K,V) + lambda * Attn(Q,K_pre,V_pre).
Var prefix_parallel(Var x, const AttentionProjections& proj, const PrefixTuner& tuner,
                    GateOverride ov = GateOverride::none);

/// Attention over the token sequence with prompts appended; when
/// `discard_prompts`, only the original-token rows are returned.
Var prompt_original(Var x, const AttentionProjections& proj, const PromptTuner& tuner,
                    bool discard_prompts);

/// Gated rewrite of prompt_original. The token segment is gated by lambda;
/// the prompt segment (kept only when !discard_prompts) is gated by beta.
Var prompt_parallel(Var x, const AttentionProjections& proj, const PromptTuner& tuner,
                    bool discard_prompts, GateOverride ov = GateOverride::none);

/// Additive-delta forms for the unified composition x' = OP(x) + tuner(x):
/// per query, lambda * (extra-branch attention - original attention), so a
/// direct-scaled delta added to the full MHA reproduces prefix/prompt
/// tuning exactly. Multi-head variants run through the frozen projections
/// and output matrix; the standalone variants use caller-supplied
/// single-head q/k/v projections (for sites with no native attention).
Var prefix_parallel_delta(Var x, const AttentionProjections& proj, const PrefixTuner& tuner,
                          GateOverride ov = GateOverride::none);
Var prompt_parallel_delta(Var x, const AttentionProjections& proj, const PromptTuner& tuner,
                          GateOverride ov = GateOverride::none);
Var prefix_delta_standalone(Var x, Var w_q, Var w_k, Var w_v, const PrefixTuner& tuner,
                            GateOverride ov = GateOverride::none);
Var prompt_delta_standalone(Var x, Var w_q, Var w_k, Var w_v, const PromptTuner& tuner,
                            GateOverride ov = GateOverride::none);

/// Classic adapter with inner residual, applied after the FFN:
/// ffn_out + act(ffn_out W_down) W_up.
Var adapter_sequential(Var ffn_out, const AdapterTuner& tuner);

/// Bottleneck delta only: act(x W_down) W_up. The composer adds it to OP(x).
Var adapter_parallel(Var x, const AdapterTuner& tuner);

/// Per-query mass of the extra key group under the joint softmax:
/// lambda = S_extra / (S_base + S_extra), with sums of exponentials of the
/// scaled logits sharing one row-wise max shift across both groups.
/// q: [.., T, dh], k_base: [.., Tk, dh], k_extra: [.., m, dh] -> [.., T].
Var lambda_gate(Var q, Var k_base, Var k_extra, double logit_scale,
                GateOverride ov = GateOverride::none);

/// Forward-only gate evaluation for reports and tests ([heads, T] rows).
GateVector compute_lambda_gate(const Tensor& x, const AttentionProjections& proj,
                               const PrefixTuner& tuner);
GateVector compute_prompt_gates(const Tensor& x, const AttentionProjections& proj,
                                const PromptTuner& tuner);

// ---- scaling strategies ------------------------------------------------------

enum class ScalingKind { direct, scalar, channel_wise, input_dependent };

std::string scaling_kind_name(ScalingKind k);
ScalingKind scaling_kind_from_name(const std::string& name);

/// Multiplier applied to a tuner delta before it joins the residual stream.
struct Scaling {
  ScalingKind kind = ScalingKind::direct;
  Var s;        // scalar [] or per-channel [width]
  Var g1, g2;   // input-dependent gate projections: width x width/4, width/4 x width

  static Scaling make(ScalingKind kind, int64_t width, Rng& rng,
                      const std::string& name_prefix = "scaling");

  /// `x` is the OP input the tuner saw; only input_dependent uses it.
  Var apply(Var delta, Var x) const;
};

Var apply_scaling(Var delta, const Scaling& strategy, Var x);

}  // namespace utuning
