#pragma once

#include <string>
#include <utility>
#include <vector>

#include "utuning/autograd.hpp"

namespace utuning {

enum class Activation { gelu, relu };

Var apply_activation(Var x, Activation act);

/// Frozen-able attention projections. All four matrices are d x d; heads
/// operate on column slices of width d / heads.
struct AttentionProjections {
  Var w_q, w_k, w_v, w_o;
  int64_t heads = 1;
  int64_t width = 0;
  int64_t head_width() const { return width / heads; }
};

struct FfnWeights {
  Var w1, b1, w2, b2;
  Activation act = Activation::gelu;
};

struct LayerNormParams {
  Var gamma, beta;
  double eps = 1e-6;
};

struct TransformerBlock {
  LayerNormParams ln1;
  AttentionProjections attn;
  LayerNormParams ln2;
  FfnWeights ffn;
};

struct BackboneConfig {
  int64_t layers = 4;
  int64_t width = 64;
  int64_t heads = 4;
  int64_t ffn_width = 256;
  int64_t seq_len = 16;
  int64_t classes = 10;
  int64_t input_width = 64;
  bool class_token = false;

  /// Small configuration every training/ablation run uses.
  static BackboneConfig desk();
  /// ViT-B/16-sized configuration; used only for parameter counting.
  static BackboneConfig vitb16();
  static BackboneConfig by_name(const std::string& name);

  void validate() const;
};

struct Backbone {
  BackboneConfig config;
  Var embed_w, embed_b;  // input_width x width, width
  Var pos_embed;         // [T(+1), width]
  Var cls_token;         // [1, width], present iff class_token
  std::vector<TransformerBlock> blocks;
  LayerNormParams final_ln;
  Var head_w, head_b;  // width x classes, classes

  static Backbone random_init(const BackboneConfig& cfg, Rng& rng);

  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::vector<Var> parameters() const;

  /// Marks everything except the classifier head non-trainable.
  void freeze();
  bool head_only_trainable() const;
};

Var multi_head_attention(Var x, const AttentionProjections& proj);
Var feed_forward(Var x, const FfnWeights& w);
Var transformer_block(Var x, const TransformerBlock& block);

/// Linear feature embedding plus class token and positional rows.
Var embed_tokens(Var tokens, const Backbone& bb);
/// Class-token pick or mean pool: [.., T(+1), d] -> [B, d] / [1, d].
Var pool_features(Var feats, const Backbone& bb, bool batched);
/// Pooling followed by the classifier head.
Var pool_and_head(Var feats, const Backbone& bb, bool batched);

/// Embeds raw token features, runs all blocks and the final norm.
/// Returns the normalized token sequence [.., T(+1), width].
Var forward_features(Var tokens, const Backbone& bb);
/// Full classification pass: features -> class token or mean pool -> logits.
Var forward_classify(Var tokens, const Backbone& bb);

void freeze_backbone(Backbone& bb);

/// Debug hook: per-head attention weight matrices for one forward pass.
std::vector<Tensor> attention_weight_rows(const Tensor& x, const AttentionProjections& proj);

int64_t count_trainable_params(const std::vector<std::pair<std::string, Var>>& named);

}  // namespace utuning
