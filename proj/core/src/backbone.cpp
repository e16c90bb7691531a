#include "utuning/backbone.hpp"

#include <cmath>

namespace utuning {

Var apply_activation(Var x, Activation act) {
  switch (act) {
    case Activation::gelu:
      return gelu(std::move(x));
    case Activation::relu:
      return relu(std::move(x));
  }
  throw ContractError("unknown activation");
}

BackboneConfig BackboneConfig::desk() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::vitb16() {
  BackboneConfig c;
  c.layers = 12;
  c.width = 768;
  c.heads = 12;
  c.ffn_width = 3072;
  c.seq_len = 196;
  c.classes = 100;
  c.input_width = 768;
  c.class_token = true;
  return c;
}

BackboneConfig BackboneConfig::by_name(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "vitb16") return vitb16();
  throw ConfigError("unknown backbone config '" + name + "' (expected desk or vitb16)");
}

void BackboneConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || ffn_width < 1 || seq_len < 1 || classes < 1 ||
      input_width < 1) {
    throw ConfigError("backbone config extents must be positive");
  }
  if (width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (ffn_width < width) {
    throw ConfigError("ffn width " + std::to_string(ffn_width) + " must be >= width " +
                      std::to_string(width));
  }
}

namespace {

Var init_linear(Rng& rng, int64_t in, int64_t out, const std::string& name) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return variable(rng.uniform_tensor({in, out}, -bound, bound), true, name);
}

LayerNormParams init_ln(int64_t width, const std::string& prefix) {
  LayerNormParams ln;
  ln.gamma = variable(Tensor::ones({width}), true, prefix + ".gamma");
  ln.beta = variable(Tensor::zeros({width}), true, prefix + ".beta");
  return ln;
}

}  // namespace

Backbone Backbone::random_init(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  Backbone bb;
  bb.config = cfg;
  bb.embed_w = init_linear(rng, cfg.input_width, cfg.width, "backbone.embed.weight");
  bb.embed_b = variable(Tensor::zeros({cfg.width}), true, "backbone.embed.bias");
  int64_t rows = cfg.seq_len + (cfg.class_token ? 1 : 0);
  bb.pos_embed = variable(rng.normal_tensor({rows, cfg.width}, 0.02), true, "backbone.pos_embed");
  if (cfg.class_token) {
    bb.cls_token = variable(rng.normal_tensor({1, cfg.width}, 0.02), true, "backbone.cls_token");
  }
  for (int64_t i = 0; i < cfg.layers; ++i) {
    std::string p = "backbone.block" + std::to_string(i);
    TransformerBlock blk;
    blk.ln1 = init_ln(cfg.width, p + ".ln1");
    blk.attn.heads = cfg.heads;
    blk.attn.width = cfg.width;
    blk.attn.w_q = init_linear(rng, cfg.width, cfg.width, p + ".attn.w_q");
    blk.attn.w_k = init_linear(rng, cfg.width, cfg.width, p + ".attn.w_k");
    blk.attn.w_v = init_linear(rng, cfg.width, cfg.width, p + ".attn.w_v");
    blk.attn.w_o = init_linear(rng, cfg.width, cfg.width, p + ".attn.w_o");
    blk.ln2 = init_ln(cfg.width, p + ".ln2");
    blk.ffn.w1 = init_linear(rng, cfg.width, cfg.ffn_width, p + ".ffn.w1");
    blk.ffn.b1 = variable(Tensor::zeros({cfg.ffn_width}), true, p + ".ffn.b1");
    blk.ffn.w2 = init_linear(rng, cfg.ffn_width, cfg.width, p + ".ffn.w2");
    blk.ffn.b2 = variable(Tensor::zeros({cfg.width}), true, p + ".ffn.b2");
    bb.blocks.push_back(std::move(blk));
  }
  bb.final_ln = init_ln(cfg.width, "backbone.final_ln");
  bb.head_w = init_linear(rng, cfg.width, cfg.classes, "head.weight");
  bb.head_b = variable(Tensor::zeros({cfg.classes}), true, "head.bias");
  return bb;
}

std::vector<std::pair<std::string, Var>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  auto put = [&out](const Var& v) {
    if (v) out.emplace_back(v->name, v);
  };
  put(embed_w);
  put(embed_b);
  put(pos_embed);
  put(cls_token);
  for (const auto& blk : blocks) {
    put(blk.ln1.gamma);
    put(blk.ln1.beta);
    put(blk.attn.w_q);
    put(blk.attn.w_k);
    put(blk.attn.w_v);
    put(blk.attn.w_o);
    put(blk.ln2.gamma);
    put(blk.ln2.beta);
    put(blk.ffn.w1);
    put(blk.ffn.b1);
    put(blk.ffn.w2);
    put(blk.ffn.b2);
  }
  put(final_ln.gamma);
  put(final_ln.beta);
  put(head_w);
  put(head_b);
  return out;
}

std::vector<Var> Backbone::parameters() const {
  std::vector<Var> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

void Backbone::freeze() {
  for (auto& [name, v] : named_parameters()) v->trainable = false;
  head_w->trainable = true;
  head_b->trainable = true;
}

bool Backbone::head_only_trainable() const {
  for (const auto& [name, v] : named_parameters()) {
    bool is_head = v == head_w || v == head_b;
    if (v->trainable != is_head) return false;
  }
  return true;
}

void freeze_backbone(Backbone& bb) { bb.freeze(); }

Var multi_head_attention(Var x, const AttentionProjections& proj) {
  if (x->value.dim(-1) != proj.width) {
    throw DimensionError("multi_head_attention: input width " + shape_str(x->value.shape()) +
                         " does not match projections [" + std::to_string(proj.width) + "]");
  }
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = matmul(x, proj.w_q);
  Var k = matmul(x, proj.w_k);
  Var v = matmul(x, proj.w_v);
  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(proj.heads));
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    Var vh = narrow(v, -1, h * dh, dh);
    Var attn = softmax(scale(matmul_nt(qh, kh), sc), -1);
    heads.push_back(matmul(attn, vh));
  }
  Var merged = proj.heads == 1 ? heads[0] : concat(heads, -1);
  return matmul(merged, proj.w_o);
}

std::vector<Tensor> attention_weight_rows(const Tensor& x, const AttentionProjections& proj) {
  Var xv = constant(x);
  Var q = matmul(xv, proj.w_q);
  Var k = matmul(xv, proj.w_k);
  const int64_t dh = proj.head_width();
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> out;
  for (int64_t h = 0; h < proj.heads; ++h) {
    Var qh = narrow(q, -1, h * dh, dh);
    Var kh = narrow(k, -1, h * dh, dh);
    out.push_back(softmax_value(scale(matmul_nt(qh, kh), sc)->value, -1));
  }
  return out;
}

Var feed_forward(Var x, const FfnWeights& w) {
  if (x->value.dim(-1) != w.w1->value.dim(0)) {
    throw DimensionError("feed_forward: input width " + shape_str(x->value.shape()) +
                         " does not match " + shape_str(w.w1->value.shape()));
  }
  Var hidden = apply_activation(add(matmul(x, w.w1), w.b1), w.act);
  return add(matmul(hidden, w.w2), w.b2);
}

Var transformer_block(Var x, const TransformerBlock& block) {
  Var u = add(x, multi_head_attention(layer_norm(x, block.ln1.gamma, block.ln1.beta, block.ln1.eps),
                                      block.attn));
  return add(u, feed_forward(layer_norm(u, block.ln2.gamma, block.ln2.beta, block.ln2.eps), block.ffn));
}

Var embed_tokens(Var tokens, const Backbone& bb) {
  Var x = add(matmul(tokens, bb.embed_w), bb.embed_b);
  if (bb.config.class_token) {
    Var cls = bb.cls_token;
    if (x->value.rank() == 3) cls = broadcast_batch(cls, x->value.dim(0));
    x = concat({cls, x}, -2);
  }
  return add(x, bb.pos_embed);
}

Var pool_features(Var feats, const Backbone& bb, bool batched) {
  if (bb.config.class_token) {
    Var pooled = narrow(feats, -2, 0, 1);  // [.., 1, d]
    if (batched) return reshape(pooled, {pooled->value.dim(0), bb.config.width});
    return reshape(pooled, {1, bb.config.width});
  }
  Var pooled = mean_axis(feats, -2);
  return batched ? pooled : reshape(pooled, {1, bb.config.width});
}

Var pool_and_head(Var feats, const Backbone& bb, bool batched) {
  Var pooled = pool_features(std::move(feats), bb, batched);
  Var logits = add(matmul(pooled, bb.head_w), bb.head_b);
  if (!batched) logits = reshape(logits, {bb.config.classes});
  return logits;
}

Var forward_features(Var tokens, const Backbone& bb) {
  Var x = embed_tokens(std::move(tokens), bb);
  for (const auto& blk : bb.blocks) x = transformer_block(x, blk);
  return layer_norm(x, bb.final_ln.gamma, bb.final_ln.beta, bb.final_ln.eps);
}

Var forward_classify(Var tokens, const Backbone& bb) {
  bool batched = tokens->value.rank() == 3;
  Var feats = forward_features(std::move(tokens), bb);
  return pool_and_head(std::move(feats), bb, batched);
}

int64_t count_trainable_params(const std::vector<std::pair<std::string, Var>>& named) {
  int64_t total = 0;
  for (const auto& [name, v] : named) {
    if (v->trainable) total += v->value.numel();
  }
  return total;
}

}  // namespace utuning
