#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "utuning/gradcheck.hpp"
#include "utuning/tuners.hpp"

using namespace utuning;

namespace {

AttentionProjections random_proj(Rng& rng, int64_t d, int64_t heads) {
  AttentionProjections p;
  p.heads = heads;
  p.width = d;
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  p.w_q = constant(rng.uniform_tensor({d, d}, -bound, bound));
  p.w_k = constant(rng.uniform_tensor({d, d}, -bound, bound));
  p.w_v = constant(rng.uniform_tensor({d, d}, -bound, bound));
  p.w_o = constant(rng.uniform_tensor({d, d}, -bound, bound));
  return p;
}

// Brute-force reference for attention with extra key/value rows prepended:
// per head, softmax over [extra; projected] logits with explicit loops.
Tensor prefix_concat_oracle(const Tensor& x, const AttentionProjections& proj, const Tensor& k_pre,
                            const Tensor& v_pre, int64_t m) {
  int64_t t = x.dim(0), d = x.dim(1);
  int64_t h = proj.heads, dh = d / h;
  auto project = [&](const Var& w) {
    Tensor out({t, d});
    for (int64_t i = 0; i < t; ++i) {
      for (int64_t j = 0; j < d; ++j) {
        double acc = 0;
        for (int64_t l = 0; l < d; ++l) acc += x[i * d + l] * w->value[l * d + j];
        out[i * d + j] = acc;
      }
    }
    return out;
  };
  Tensor q = project(proj.w_q), k = project(proj.w_k), v = project(proj.w_v);
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor merged({t, d});
  for (int64_t head = 0; head < h; ++head) {
    for (int64_t i = 0; i < t; ++i) {
      int64_t total = m + t;
      std::vector<double> logits(static_cast<size_t>(total));
      for (int64_t j = 0; j < m; ++j) {
        double acc = 0;
        for (int64_t l = 0; l < dh; ++l) {
          acc += q[i * d + head * dh + l] * k_pre[(head * m + j) * dh + l];
        }
        logits[static_cast<size_t>(j)] = acc * sc;
      }
      for (int64_t j = 0; j < t; ++j) {
        double acc = 0;
        for (int64_t l = 0; l < dh; ++l) {
          acc += q[i * d + head * dh + l] * k[j * d + head * dh + l];
        }
        logits[static_cast<size_t>(m + j)] = acc * sc;
      }
      double mx = logits[0];
      for (double lv : logits) mx = std::max(mx, lv);
      double denom = 0;
      for (double& lv : logits) {
        lv = std::exp(lv - mx);
        denom += lv;
      }
      for (int64_t l = 0; l < dh; ++l) {
        double acc = 0;
        for (int64_t j = 0; j < m; ++j) {
          acc += logits[static_cast<size_t>(j)] / denom * v_pre[(head * m + j) * dh + l];
        }
        for (int64_t j = 0; j < t; ++j) {
          acc += logits[static_cast<size_t>(m + j)] / denom * v[j * d + head * dh + l];
        }
        merged[i * d + head * dh + l] = acc;
      }
    }
  }
  Tensor out({t, d});
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      double acc = 0;
      for (int64_t l = 0; l < d; ++l) acc += merged[i * d + l] * proj.w_o->value[l * d + j];
      out[i * d + j] = acc;
    }
  }
  return out;
}

// Prefix-group mass of the joint softmax row, computed from the full
// concatenated key set with explicit loops.
double lambda_oracle(const Tensor& q_row, const Tensor& k, const Tensor& k_pre, double sc) {
  int64_t dh = q_row.numel();
  int64_t t = k.dim(0), m = k_pre.dim(0);
  std::vector<double> logits;
  for (int64_t j = 0; j < m; ++j) {
    double acc = 0;
    for (int64_t l = 0; l < dh; ++l) acc += q_row[l] * k_pre[j * dh + l];
    logits.push_back(acc * sc);
  }
  for (int64_t j = 0; j < t; ++j) {
    double acc = 0;
    for (int64_t l = 0; l < dh; ++l) acc += q_row[l] * k[j * dh + l];
    logits.push_back(acc * sc);
  }
  double mx = logits[0];
  for (double lv : logits) mx = std::max(mx, lv);
  double denom = 0, pre = 0;
  for (size_t j = 0; j < logits.size(); ++j) {
    double e = std::exp(logits[j] - mx);
    denom += e;
    if (j < static_cast<size_t>(m)) pre += e;
  }
  return pre / denom;
}

PrefixTuner make_prefix(Rng& rng, int64_t m, int64_t heads, int64_t dh) {
  PrefixTuner t;
  t.prefix_len = m;
  t.heads = heads;
  t.head_width = dh;
  if (m > 0) {
    t.k_pre = variable(rng.normal_tensor({heads, m, dh}), true, "k_pre");
    t.v_pre = variable(rng.normal_tensor({heads, m, dh}), true, "v_pre");
  }
  return t;
}

PromptTuner make_prompt(Rng& rng, int64_t n, int64_t d) {
  PromptTuner t;
  t.count = n;
  t.width = d;
  if (n > 0) t.tokens = variable(rng.normal_tensor({n, d}), true, "tokens");
  return t;
}

}  // namespace

TEST_CASE("empty prefix degenerates to plain attention") {
  Rng rng(1);
  AttentionProjections proj = random_proj(rng, 8, 2);
  PrefixTuner t = make_prefix(rng, 0, 2, 4);
  Tensor x = rng.normal_tensor({4, 8});
  Tensor plain = multi_head_attention(constant(x), proj)->value;
  CHECK(prefix_original(constant(x), proj, t)->value == plain);
  CHECK(prefix_parallel(constant(x), proj, t)->value == plain);
}

TEST_CASE("very negative prefix logits vanish from the mixture") {
  Rng rng(2);
  int64_t d = 8;
  AttentionProjections proj = random_proj(rng, d, 2);
  proj.w_q = constant(Tensor::identity(d));
  PrefixTuner t = make_prefix(rng, 2, 2, 4);
  t.k_pre->value.fill(-1e6);
  Tensor x = rng.uniform_tensor({4, d}, 0.5, 1.5);  // positive queries
  Tensor with_prefix = prefix_original(constant(x), proj, t)->value;
  Tensor plain = multi_head_attention(constant(x), proj)->value;
  CHECK(max_abs_diff(with_prefix, plain) < 1e-9);
}

TEST_CASE("prefix attention matches the brute-force concat oracle") {
  Rng rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    int64_t d = 8, h = 2, m = 3, t_len = 5;
    AttentionProjections proj = random_proj(rng, d, h);
    PrefixTuner t = make_prefix(rng, m, h, d / h);
    Tensor x = rng.normal_tensor({t_len, d});
    Tensor got = prefix_original(constant(x), proj, t)->value;
    Tensor want = prefix_concat_oracle(x, proj, t.k_pre->value, t.v_pre->value, m);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("lambda gate: equal logits give the counting ratio") {
  Rng rng(4);
  int64_t d = 8, h = 2;
  AttentionProjections proj = random_proj(rng, d, h);
  proj.w_k = constant(Tensor::zeros({d, d}));  // all original logits zero
  PrefixTuner t = make_prefix(rng, 1, h, d / h);
  t.k_pre->value.fill(0.0);  // all prefix logits zero
  Tensor x = rng.normal_tensor({3, d});
  GateVector g = compute_lambda_gate(x, proj, t);
  // 3 original keys, 1 prefix key, all logits equal: mass ratio m/(n+m).
  for (int64_t i = 0; i < g.lambda.numel(); ++i) {
    CHECK(g.lambda[i] == doctest::Approx(0.25).epsilon(1e-14));
  }
}

TEST_CASE("lambda gate: empty prefix gives exactly zero") {
  Rng rng(5);
  AttentionProjections proj = random_proj(rng, 8, 2);
  PrefixTuner t = make_prefix(rng, 0, 2, 4);
  Tensor x = rng.normal_tensor({3, 8});
  GateVector g = compute_lambda_gate(x, proj, t);
  CHECK(g.lambda == Tensor::zeros({2, 3}));
}

TEST_CASE("lambda gate matches the concat-softmax oracle") {
  Rng rng(6);
  for (int rep = 0; rep < 5; ++rep) {
    int64_t d = 8, h = 2, dh = 4, m = 3, t_len = 4;
    AttentionProjections proj = random_proj(rng, d, h);
    PrefixTuner t = make_prefix(rng, m, h, dh);
    Tensor x = rng.normal_tensor({t_len, d});
    GateVector g = compute_lambda_gate(x, proj, t);
    Tensor q = matmul(constant(x), proj.w_q)->value;
    Tensor k = matmul(constant(x), proj.w_k)->value;
    double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t head = 0; head < h; ++head) {
      Tensor k_head({t_len, dh});
      for (int64_t j = 0; j < t_len; ++j) {
        for (int64_t l = 0; l < dh; ++l) k_head[j * dh + l] = k[j * d + head * dh + l];
      }
      Tensor kp_head({m, dh},
                     std::vector<double>(t.k_pre->value.data() + head * m * dh,
                                         t.k_pre->value.data() + (head + 1) * m * dh));
      for (int64_t i = 0; i < t_len; ++i) {
        Tensor q_row({dh});
        for (int64_t l = 0; l < dh; ++l) q_row[l] = q[i * d + head * dh + l];
        double want = lambda_oracle(q_row, k_head, kp_head, sc);
        CHECK(std::fabs(g.lambda[head * t_len + i] - want) < 1e-12);
      }
    }
  }
}

TEST_CASE("prefix parallel form equals the original form") {
  Rng rng(7);
  const int64_t widths[] = {8, 16, 64};
  const int64_t heads_set[] = {1, 2, 4};
  const int64_t ms[] = {1, 4, 10};
  for (int rep = 0; rep < 20; ++rep) {
    int64_t t_len = rng.uniform_int(1, 8);
    int64_t d = widths[rng.uniform_int(0, 2)];
    int64_t h = heads_set[rng.uniform_int(0, 2)];
    int64_t m = ms[rng.uniform_int(0, 2)];
    AttentionProjections proj = random_proj(rng, d, h);
    PrefixTuner t = make_prefix(rng, m, h, d / h);
    Tensor x = rng.normal_tensor({t_len, d});
    Tensor orig = prefix_original(constant(x), proj, t)->value;
    Tensor par = prefix_parallel(constant(x), proj, t)->value;
    CHECK(max_abs_diff(orig, par) < 1e-9);
  }
}

TEST_CASE("gate override hooks: zero keeps only the original branch") {
  Rng rng(8);
  AttentionProjections proj = random_proj(rng, 8, 2);
  PrefixTuner t = make_prefix(rng, 3, 2, 4);
  Tensor x = rng.normal_tensor({4, 8});
  Tensor forced = prefix_parallel(constant(x), proj, t, GateOverride::force_zero)->value;
  Tensor plain = multi_head_attention(constant(x), proj)->value;
  CHECK(max_abs_diff(forced, plain) < 1e-12);

  Tensor corrupted = prefix_parallel(constant(x), proj, t, GateOverride::corrupt)->value;
  Tensor orig = prefix_original(constant(x), proj, t)->value;
  CHECK(max_abs_diff(corrupted, orig) > 1e-9);  // negative control bites
}

TEST_CASE("empty prompt degenerates to plain attention") {
  Rng rng(9);
  AttentionProjections proj = random_proj(rng, 8, 2);
  PromptTuner t = make_prompt(rng, 0, 8);
  Tensor x = rng.normal_tensor({4, 8});
  Tensor plain = multi_head_attention(constant(x), proj)->value;
  CHECK(prompt_original(constant(x), proj, t, true)->value == plain);
  CHECK(prompt_parallel(constant(x), proj, t, true)->value == plain);
}

TEST_CASE("prompt attention equals attention over the duplicated sequence") {
  Rng rng(10);
  AttentionProjections proj = random_proj(rng, 8, 2);
  Tensor x = rng.normal_tensor({4, 8});
  // Prompt token identical to row 1 of x: result must equal plain attention
  // over the sequence with that row appended.
  PromptTuner t;
  t.count = 1;
  t.width = 8;
  Tensor dup({1, 8});
  for (int64_t j = 0; j < 8; ++j) dup[j] = x[1 * 8 + j];
  t.tokens = constant(dup);
  Tensor xcat({5, 8});
  std::copy(x.data(), x.data() + 32, xcat.data());
  std::copy(dup.data(), dup.data() + 8, xcat.data() + 32);
  Tensor want = multi_head_attention(constant(xcat), proj)->value;
  Tensor got = prompt_original(constant(x), proj, t, false)->value;
  CHECK(got == want);
}

TEST_CASE("discarding prompts is a bit-exact row slice") {
  Rng rng(11);
  AttentionProjections proj = random_proj(rng, 8, 2);
  PromptTuner t = make_prompt(rng, 3, 8);
  Tensor x = rng.normal_tensor({4, 8});
  Tensor full = prompt_original(constant(x), proj, t, false)->value;
  Tensor kept = prompt_original(constant(x), proj, t, true)->value;
  CHECK(kept.shape() == Shape{4, 8});
  for (int64_t i = 0; i < kept.numel(); ++i) CHECK(kept[i] == full[i]);
}

TEST_CASE("prompt parallel form equals the original form in both modes") {
  Rng rng(12);
  const int64_t widths[] = {8, 16, 64};
  const int64_t heads_set[] = {1, 2, 4};
  const int64_t ns[] = {1, 4, 10};
  for (int rep = 0; rep < 20; ++rep) {
    int64_t t_len = rng.uniform_int(1, 8);
    int64_t d = widths[rng.uniform_int(0, 2)];
    int64_t h = heads_set[rng.uniform_int(0, 2)];
    int64_t n = ns[rng.uniform_int(0, 2)];
    AttentionProjections proj = random_proj(rng, d, h);
    PromptTuner t = make_prompt(rng, n, d);
    Tensor x = rng.normal_tensor({t_len, d});
    for (bool discard : {false, true}) {
      Tensor orig = prompt_original(constant(x), proj, t, discard)->value;
      Tensor par = prompt_parallel(constant(x), proj, t, discard)->value;
      CHECK(max_abs_diff(orig, par) < 1e-9);
    }
  }
}

TEST_CASE("prompt gates on a mirrored token set stay consistent") {
  Rng rng(13);
  int64_t d = 8, h = 2;
  AttentionProjections proj = random_proj(rng, d, h);
  Tensor x = rng.normal_tensor({3, d});
  PromptTuner t;
  t.count = 3;
  t.width = d;
  t.tokens = constant(x);  // prompts identical to the tokens
  GateVector g = compute_prompt_gates(x, proj, t);
  CHECK(g.has_beta);
  // Same key sets on both sides: lambda and beta are mirror masses and the
  // joint row over 2T identical-key groups splits evenly.
  for (int64_t i = 0; i < g.lambda.numel(); ++i) {
    CHECK(g.lambda[i] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.beta[i] == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("adapter zero-init and zero-down cases are exact identities") {
  Rng rng(14);
  int64_t d = 8, r = 3;
  AdapterTuner t = AdapterTuner::init(r, d, rng);
  Tensor x = rng.normal_tensor({4, d});
  // W_up starts at zero by construction.
  CHECK(adapter_sequential(constant(x), t)->value == x);
  CHECK(adapter_parallel(constant(x), t)->value == Tensor::zeros({4, d}));

  t.w_up = constant(rng.normal_tensor({r, d}));
  t.w_down = constant(Tensor::zeros({d, r}));
  CHECK(adapter_sequential(constant(x), t)->value == x);  // gelu(0) = 0
}

TEST_CASE("adapter matches the two-matmul reference") {
  Rng rng(15);
  int64_t d = 8, r = 3;
  AdapterTuner t = AdapterTuner::init(r, d, rng);
  t.w_up = constant(rng.normal_tensor({r, d}));
  Tensor x = rng.normal_tensor({4, d});
  Tensor got = adapter_parallel(constant(x), t)->value;
  Tensor want = matmul(gelu(matmul(constant(x), t.w_down)), t.w_up)->value;
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("adapter rearrangement identity is bit-exact") {
  Rng rng(16);
  int64_t d = 8;
  FfnWeights ffn;
  ffn.w1 = constant(rng.normal_tensor({d, 2 * d}));
  ffn.b1 = constant(rng.normal_tensor({2 * d}));
  ffn.w2 = constant(rng.normal_tensor({2 * d, d}));
  ffn.b2 = constant(rng.normal_tensor({d}));
  AdapterTuner t = AdapterTuner::init(3, d, rng);
  t.w_up = constant(rng.normal_tensor({3, d}));
  Tensor x = rng.normal_tensor({4, d});
  Tensor seq = adapter_sequential(feed_forward(constant(x), ffn), t)->value;
  Var ffn_out = feed_forward(constant(x), ffn);
  Tensor par = add(ffn_out, adapter_parallel(ffn_out, t))->value;
  CHECK(seq == par);
}

TEST_CASE("scaling strategies") {
  Rng rng(17);
  int64_t d = 8;
  Tensor delta_v = rng.normal_tensor({4, d});
  Tensor x_v = rng.normal_tensor({4, d});

  Scaling direct = Scaling::make(ScalingKind::direct, d, rng);
  Tensor out_direct = direct.apply(constant(delta_v), constant(x_v))->value;
  CHECK(out_direct == delta_v);

  Scaling channel = Scaling::make(ScalingKind::channel_wise, d, rng);
  CHECK(channel.apply(constant(delta_v), constant(x_v))->value == out_direct);  // ones == direct

  channel.s->value.fill(2.0);
  Tensor doubled = channel.apply(constant(delta_v), constant(x_v))->value;
  for (int64_t i = 0; i < doubled.numel(); ++i) CHECK(doubled[i] == 2.0 * delta_v[i]);

  Scaling scalar = Scaling::make(ScalingKind::scalar, d, rng);
  scalar.s->value.fill(0.0);
  CHECK(scalar.apply(constant(delta_v), constant(x_v))->value == Tensor::zeros({4, d}));

  Scaling gated = Scaling::make(ScalingKind::input_dependent, d, rng);
  Tensor gated_out = gated.apply(constant(delta_v), constant(x_v))->value;
  // Near-zero gate projections keep the sigmoid close to one half.
  for (int64_t i = 0; i < gated_out.numel(); ++i) {
    CHECK(std::fabs(gated_out[i] - 0.5 * delta_v[i]) < 0.05 * std::fabs(delta_v[i]) + 1e-9);
  }
}

TEST_CASE("tuner parameter gradients pass finite-difference checks") {
  Rng rng(18);
  int64_t d = 8, h = 2, t_len = 3;
  AttentionProjections proj = random_proj(rng, d, h);
  Tensor x = rng.normal_tensor({t_len, d});
  Tensor target = rng.normal_tensor({t_len, d});

  PrefixTuner pre = make_prefix(rng, 2, h, d / h);
  auto pre_loss = [&] {
    Var diff = sub(prefix_parallel(constant(x), proj, pre), constant(target));
    return sum(mul(diff, diff));
  };
  CHECK(check_gradient(pre.k_pre, pre_loss) < 1e-4);
  CHECK(check_gradient(pre.v_pre, pre_loss) < 1e-4);

  PromptTuner pro = make_prompt(rng, 2, d);
  auto pro_loss = [&] {
    Var diff = sub(prompt_parallel(constant(x), proj, pro, true), constant(target));
    return sum(mul(diff, diff));
  };
  CHECK(check_gradient(pro.tokens, pro_loss) < 1e-4);

  AdapterTuner ada = AdapterTuner::init(3, d, rng);
  for (int64_t i = 0; i < ada.w_up->value.numel(); ++i) ada.w_up->value[i] = rng.normal(0, 0.3);
  Scaling sc = Scaling::make(ScalingKind::input_dependent, d, rng);
  auto ada_loss = [&] {
    Var diff = sub(sc.apply(adapter_parallel(constant(x), ada), constant(x)), constant(target));
    return sum(mul(diff, diff));
  };
  CHECK(check_gradient(ada.w_down, ada_loss) < 1e-4);
  CHECK(check_gradient(ada.w_up, ada_loss) < 1e-4);
  CHECK(check_gradient(sc.g1, ada_loss) < 1e-4);
  CHECK(check_gradient(sc.g2, ada_loss) < 1e-4);

  Scaling cw = Scaling::make(ScalingKind::channel_wise, d, rng);
  auto cw_loss = [&] {
    Var diff = sub(cw.apply(adapter_parallel(constant(x), ada), constant(x)), constant(target));
    return sum(mul(diff, diff));
  };
  CHECK(check_gradient(cw.s, cw_loss) < 1e-4);
}

TEST_CASE("tuner dimension mismatches raise errors") {
  Rng rng(19);
  AttentionProjections proj = random_proj(rng, 8, 2);
  PrefixTuner wrong = make_prefix(rng, 2, 4, 2);  // wrong head layout
  Tensor x = rng.normal_tensor({3, 8});
  CHECK_THROWS_AS(prefix_original(constant(x), proj, wrong), DimensionError);
  AdapterTuner ada = AdapterTuner::init(3, 16, rng);
  CHECK_THROWS_AS(adapter_parallel(constant(x), ada), DimensionError);
  CHECK_THROWS_AS(AdapterTuner::init(16, 16, rng), ConfigError);
}
