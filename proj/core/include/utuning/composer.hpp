#pragma once

#include <optional>
#include <string>
#include <vector>

#include "utuning/tuners.hpp"

namespace utuning {

/// Frozen operation a tuner attaches to: the attention, the feed-forward
/// network, or the whole residual block.
enum class OpSite { mha, ffn, block };
enum class TunerKind { p_adapter, p_prefix, p_prompt };

std::string site_name(OpSite s);
OpSite site_from_name(const std::string& name);
std::string kind_name(TunerKind k);
TunerKind kind_from_name(const std::string& name);

/// One tuner attachment: where, what, how wide, and how its delta is scaled.
/// `dim` is the adapter bottleneck, prefix length, or prompt count.
struct TunerSpec {
  OpSite site = OpSite::mha;
  TunerKind kind = TunerKind::p_adapter;
  int64_t dim = 10;
  ScalingKind scaling = ScalingKind::channel_wise;
};

struct UTuningConfig {
  std::string name = "custom";
  std::vector<int64_t> layer_range;  // block indices; empty = touch nothing
  std::vector<TunerSpec> specs;

  void validate(const BackboneConfig& cfg) const;

  std::string to_json_string() const;
  static UTuningConfig from_json_string(const std::string& text);
  static UTuningConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;
};

/// Trainable q/k/v for prefix/prompt tuners at sites with no native
/// attention (single head, full width).
struct SiteProjections {
  Var w_q, w_k, w_v;
};

/// One instantiated tuner wired to one site of one layer.
struct SiteTuner {
  TunerSpec spec;
  std::optional<AdapterTuner> adapter;
  std::optional<PrefixTuner> prefix;
  std::optional<PromptTuner> prompt;
  std::optional<SiteProjections> own_proj;  // prefix/prompt away from MHA
  Scaling scaling;

  /// Unscaled delta for site input z. `frozen_attn` is non-null only at the
  /// MHA site, where prefix/prompt reuse the frozen projections.
  Var delta(Var z, const AttentionProjections* frozen_attn) const;
  std::vector<std::pair<std::string, Var>> named_params() const;
};

/// Frozen backbone plus attached tuners and the trainable head. Copying is
/// shallow: parameters are shared handles.
struct ComposedModel {
  Backbone backbone;
  UTuningConfig config;
  std::vector<std::vector<SiteTuner>> tuners_by_layer;  // indexed by block
  bool zero_deltas = false;  // debug hook: bypass every tuner delta

  Var forward(Var tokens) const;

  struct LayerTaps {
    Tensor mha_in, mha_out, ffn_in, ffn_out, block_out;
  };
  Var forward_with_taps(Var tokens, std::vector<LayerTaps>* taps) const;

  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::vector<Var> trainable_parameters() const;
};

ComposedModel compose(const Backbone& backbone, const UTuningConfig& config, Rng& rng);

int64_t count_trainable_params(const ComposedModel& model);
int64_t count_trainable_params(const Backbone& bb);

/// The full ablation grid: 9 single-site configs, 9 dual (MHA x FFN)
/// combinations, 3 tri variants on top of the dual-adapter default, and the
/// 4 scaling variants of the default dual config. 25 configs, fixed order,
/// deterministic names.
std::vector<UTuningConfig> enumerate_ablation_grid(int64_t layers, int64_t dim = 10);

/// Named presets: "default_dual", "linear_probe", "deep_prompt", the
/// per-dataset best pairings ("fgvc_cub", "fgvc_nabirds", "fgvc_flowers",
/// "fgvc_cars", "fgvc_dogs"), and every grid config by its grid name.
UTuningConfig named_preset(const std::string& name, int64_t layers, int64_t dim = 10);

}  // namespace utuning
