#include "utuning/composer.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace utuning {

using nlohmann::json;

std::string site_name(OpSite s) {
  switch (s) {
    case OpSite::mha:
      return "mha";
    case OpSite::ffn:
      return "ffn";
    case OpSite::block:
      return "block";
  }
  throw ContractError("unknown op site");
}

OpSite site_from_name(const std::string& name) {
  if (name == "mha") return OpSite::mha;
  if (name == "ffn") return OpSite::ffn;
  if (name == "block") return OpSite::block;
  throw ConfigError("unknown site '" + name + "' (expected mha, ffn or block)");
}

std::string kind_name(TunerKind k) {
  switch (k) {
    case TunerKind::p_adapter:
      return "p_adapter";
    case TunerKind::p_prefix:
      return "p_prefix";
    case TunerKind::p_prompt:
      return "p_prompt";
  }
  throw ContractError("unknown tuner kind");
}

TunerKind kind_from_name(const std::string& name) {
  if (name == "p_adapter") return TunerKind::p_adapter;
  if (name == "p_prefix") return TunerKind::p_prefix;
  if (name == "p_prompt") return TunerKind::p_prompt;
  throw ConfigError("unknown tuner kind '" + name + "' (expected p_adapter, p_prefix or p_prompt)");
}

void UTuningConfig::validate(const BackboneConfig& cfg) const {
  for (int64_t idx : layer_range) {
    if (idx < 0 || idx >= cfg.layers) {
      throw ConfigError("layer_range: index " + std::to_string(idx) + " outside [0, " +
                        std::to_string(cfg.layers) + ")");
    }
  }
  std::set<OpSite> seen;
  for (size_t i = 0; i < specs.size(); ++i) {
    const TunerSpec& s = specs[i];
    std::string where = "specs[" + std::to_string(i) + "]";
    if (s.dim < 1) {
      throw ConfigError(where + ": dim must be >= 1, got " + std::to_string(s.dim) + " (site " +
                        site_name(s.site) + ", kind " + kind_name(s.kind) + ")");
    }
    if (!seen.insert(s.site).second) {
      throw ConfigError(where + ": duplicate tuner for site " + site_name(s.site));
    }
    if (s.kind == TunerKind::p_adapter && s.dim >= cfg.width) {
      throw ConfigError(where + ": adapter bottleneck " + std::to_string(s.dim) +
                        " must be smaller than width " + std::to_string(cfg.width));
    }
  }
}

std::string UTuningConfig::to_json_string() const {
  json j;
  j["name"] = name;
  j["layer_range"] = layer_range;
  j["specs"] = json::array();
  for (const TunerSpec& s : specs) {
    j["specs"].push_back({{"site", site_name(s.site)},
                          {"kind", kind_name(s.kind)},
                          {"dim", s.dim},
                          {"scaling", scaling_kind_name(s.scaling)}});
  }
  return j.dump(2);
}

UTuningConfig UTuningConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  UTuningConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "name") {
      if (!value.is_string()) throw ConfigError("name: must be a string");
      cfg.name = value.get<std::string>();
    } else if (key == "layer_range") {
      if (!value.is_array()) throw ConfigError("layer_range: must be an array of layer indices");
      for (const auto& v : value) {
        if (!v.is_number_integer()) throw ConfigError("layer_range: entries must be integers");
        cfg.layer_range.push_back(v.get<int64_t>());
      }
    } else if (key == "specs") {
      if (!value.is_array()) throw ConfigError("specs: must be an array");
      for (size_t i = 0; i < value.size(); ++i) {
        const auto& sj = value[i];
        std::string where = "specs[" + std::to_string(i) + "]";
        if (!sj.is_object()) throw ConfigError(where + ": must be an object");
        TunerSpec spec;
        bool have_site = false, have_kind = false;
        for (const auto& [sk, sv] : sj.items()) {
          if (sk == "site") {
            if (!sv.is_string()) throw ConfigError(where + ".site: must be a string");
            spec.site = site_from_name(sv.get<std::string>());
            have_site = true;
          } else if (sk == "kind") {
            if (!sv.is_string()) throw ConfigError(where + ".kind: must be a string");
            spec.kind = kind_from_name(sv.get<std::string>());
            have_kind = true;
          } else if (sk == "dim") {
            if (!sv.is_number_integer()) throw ConfigError(where + ".dim: must be an integer");
            spec.dim = sv.get<int64_t>();
          } else if (sk == "scaling") {
            if (!sv.is_string()) throw ConfigError(where + ".scaling: must be a string");
            spec.scaling = scaling_kind_from_name(sv.get<std::string>());
          } else {
            throw ConfigError(where + "." + sk + ": unknown key");
          }
        }
        if (!have_site) throw ConfigError(where + ": missing required key 'site'");
        if (!have_kind) throw ConfigError(where + ": missing required key 'kind'");
        cfg.specs.push_back(spec);
      }
    } else {
      throw ConfigError("unknown key '" + key + "' in config");
    }
  }
  return cfg;
}

UTuningConfig UTuningConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_string(buf.str());
}

void UTuningConfig::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file: " + path);
  out << to_json_string() << "\n";
}

// ---- site tuner -----------------------------------------------------------

Var SiteTuner::delta(Var z, const AttentionProjections* frozen_attn) const {
  switch (spec.kind) {
    case TunerKind::p_adapter:
      return adapter_parallel(std::move(z), *adapter);
    case TunerKind::p_prefix:
      if (frozen_attn) return prefix_parallel_delta(std::move(z), *frozen_attn, *prefix);
      return prefix_delta_standalone(std::move(z), own_proj->w_q, own_proj->w_k, own_proj->w_v,
                                     *prefix);
    case TunerKind::p_prompt:
      if (frozen_attn) return prompt_parallel_delta(std::move(z), *frozen_attn, *prompt);
      return prompt_delta_standalone(std::move(z), own_proj->w_q, own_proj->w_k, own_proj->w_v,
                                     *prompt);
  }
  throw ContractError("unknown tuner kind");
}

std::vector<std::pair<std::string, Var>> SiteTuner::named_params() const {
  std::vector<std::pair<std::string, Var>> out;
  auto put = [&out](const Var& v) {
    if (v) out.emplace_back(v->name, v);
  };
  if (adapter) {
    put(adapter->w_down);
    put(adapter->w_up);
    put(adapter->b_down);
    put(adapter->b_up);
  }
  if (prefix) {
    put(prefix->k_pre);
    put(prefix->v_pre);
  }
  if (prompt) put(prompt->tokens);
  if (own_proj) {
    put(own_proj->w_q);
    put(own_proj->w_k);
    put(own_proj->w_v);
  }
  put(scaling.s);
  put(scaling.g1);
  put(scaling.g2);
  return out;
}

// ---- composition ----------------------------------------------------------

ComposedModel compose(const Backbone& backbone, const UTuningConfig& config, Rng& rng) {
  config.validate(backbone.config);
  ComposedModel model;
  model.backbone = backbone;
  model.config = config;
  model.tuners_by_layer.resize(static_cast<size_t>(backbone.config.layers));

  const int64_t width = backbone.config.width;
  std::vector<int64_t> layers = config.layer_range;
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

  for (int64_t layer : layers) {
    for (const TunerSpec& spec : config.specs) {
      std::string prefix_name =
          "tuner." + std::to_string(layer) + "." + site_name(spec.site) + "." + kind_name(spec.kind);
      SiteTuner st;
      st.spec = spec;
      Rng local = rng.split(static_cast<uint64_t>(layer * 16 + static_cast<int64_t>(spec.site) * 4 +
                                                  static_cast<int64_t>(spec.kind)));
      switch (spec.kind) {
        case TunerKind::p_adapter:
          st.adapter = AdapterTuner::init(spec.dim, width, local, prefix_name);
          break;
        case TunerKind::p_prefix:
          if (spec.site == OpSite::mha) {
            st.prefix = PrefixTuner::init(spec.dim, backbone.config.heads,
                                          width / backbone.config.heads, local, prefix_name);
          } else {
            st.prefix = PrefixTuner::init(spec.dim, 1, width, local, prefix_name);
          }
          break;
        case TunerKind::p_prompt:
          st.prompt = PromptTuner::init(spec.dim, width, local, prefix_name);
          break;
      }
      if (spec.site != OpSite::mha && spec.kind != TunerKind::p_adapter) {
        double bound = 1.0 / std::sqrt(static_cast<double>(width));
        SiteProjections proj;
        proj.w_q = variable(local.uniform_tensor({width, width}, -bound, bound), true,
                            prefix_name + ".proj.w_q");
        proj.w_k = variable(local.uniform_tensor({width, width}, -bound, bound), true,
                            prefix_name + ".proj.w_k");
        proj.w_v = variable(local.uniform_tensor({width, width}, -bound, bound), true,
                            prefix_name + ".proj.w_v");
        st.own_proj = proj;
      }
      st.scaling = Scaling::make(spec.scaling, width, local,
                                 "tuner." + std::to_string(layer) + "." + site_name(spec.site) +
                                     ".scaling");
      model.tuners_by_layer[static_cast<size_t>(layer)].push_back(std::move(st));
    }
  }
  return model;
}

namespace {

const SiteTuner* find_site(const std::vector<SiteTuner>& tuners, OpSite site) {
  for (const SiteTuner& t : tuners) {
    if (t.spec.site == site) return &t;
  }
  return nullptr;
}

}  // namespace

Var ComposedModel::forward_with_taps(Var tokens, std::vector<LayerTaps>* taps) const {
  bool batched = tokens->value.rank() == 3;
  Var x = embed_tokens(std::move(tokens), backbone);
  if (taps) taps->clear();
  for (size_t i = 0; i < backbone.blocks.size(); ++i) {
    const TransformerBlock& blk = backbone.blocks[i];
    const std::vector<SiteTuner>& sts = tuners_by_layer[i];
    Var block_in = x;
    Var a_in = layer_norm(x, blk.ln1.gamma, blk.ln1.beta, blk.ln1.eps);
    Var mha_out = multi_head_attention(a_in, blk.attn);
    if (const SiteTuner* st = find_site(sts, OpSite::mha); st && !zero_deltas) {
      mha_out = add(mha_out, st->scaling.apply(st->delta(a_in, &blk.attn), a_in));
    }
    Var u = add(x, mha_out);
    Var f_in = layer_norm(u, blk.ln2.gamma, blk.ln2.beta, blk.ln2.eps);
    Var ffn_out = feed_forward(f_in, blk.ffn);
    if (const SiteTuner* st = find_site(sts, OpSite::ffn); st && !zero_deltas) {
      ffn_out = add(ffn_out, st->scaling.apply(st->delta(f_in, nullptr), f_in));
    }
    Var y = add(u, ffn_out);
    if (const SiteTuner* st = find_site(sts, OpSite::block); st && !zero_deltas) {
      y = add(y, st->scaling.apply(st->delta(block_in, nullptr), block_in));
    }
    if (taps) {
      taps->push_back(LayerTaps{a_in->value, mha_out->value, f_in->value, ffn_out->value, y->value});
    }
    x = y;
  }
  x = layer_norm(x, backbone.final_ln.gamma, backbone.final_ln.beta, backbone.final_ln.eps);
  return pool_and_head(std::move(x), backbone, batched);
}

Var ComposedModel::forward(Var tokens) const { return forward_with_taps(std::move(tokens), nullptr); }

std::vector<std::pair<std::string, Var>> ComposedModel::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out = backbone.named_parameters();
  for (const auto& layer : tuners_by_layer) {
    for (const SiteTuner& st : layer) {
      for (auto& nv : st.named_params()) out.push_back(std::move(nv));
    }
  }
  return out;
}

std::vector<Var> ComposedModel::trainable_parameters() const {
  std::vector<Var> out;
  for (const auto& [name, v] : named_parameters()) {
    if (v->trainable) out.push_back(v);
  }
  return out;
}

int64_t count_trainable_params(const ComposedModel& model) {
  return count_trainable_params(model.named_parameters());
}

int64_t count_trainable_params(const Backbone& bb) {
  return count_trainable_params(bb.named_parameters());
}

// ---- grid and presets -------------------------------------------------------

std::vector<UTuningConfig> enumerate_ablation_grid(int64_t layers, int64_t dim) {
  std::vector<int64_t> all(static_cast<size_t>(layers));
  std::iota(all.begin(), all.end(), 0);
  std::vector<UTuningConfig> out;
  auto push = [&](std::string name, std::vector<TunerSpec> specs) {
    UTuningConfig cfg;
    cfg.name = std::move(name);
    cfg.layer_range = all;
    cfg.specs = std::move(specs);
    out.push_back(std::move(cfg));
  };
  const TunerKind kinds[] = {TunerKind::p_adapter, TunerKind::p_prefix, TunerKind::p_prompt};
  const OpSite sites[] = {OpSite::mha, OpSite::ffn, OpSite::block};

  for (TunerKind k : kinds) {
    for (OpSite s : sites) {
      push("single_" + kind_name(k) + "_" + site_name(s),
           {TunerSpec{s, k, dim, ScalingKind::channel_wise}});
    }
  }
  for (TunerKind km : kinds) {
    for (TunerKind kf : kinds) {
      push("dual_" + kind_name(km) + "_" + kind_name(kf),
           {TunerSpec{OpSite::mha, km, dim, ScalingKind::channel_wise},
            TunerSpec{OpSite::ffn, kf, dim, ScalingKind::channel_wise}});
    }
  }
  // Tri variants extend the strongest dual pairing (adapter on both sites).
  for (TunerKind kb : kinds) {
    push("tri_" + kind_name(kb),
         {TunerSpec{OpSite::mha, TunerKind::p_adapter, dim, ScalingKind::channel_wise},
          TunerSpec{OpSite::ffn, TunerKind::p_adapter, dim, ScalingKind::channel_wise},
          TunerSpec{OpSite::block, kb, dim, ScalingKind::channel_wise}});
  }
  const ScalingKind scalings[] = {ScalingKind::direct, ScalingKind::scalar,
                                  ScalingKind::channel_wise, ScalingKind::input_dependent};
  for (ScalingKind sk : scalings) {
    push("scaling_" + scaling_kind_name(sk),
         {TunerSpec{OpSite::mha, TunerKind::p_adapter, dim, sk},
          TunerSpec{OpSite::ffn, TunerKind::p_adapter, dim, sk}});
  }
  return out;
}

UTuningConfig named_preset(const std::string& name, int64_t layers, int64_t dim) {
  std::vector<int64_t> all(static_cast<size_t>(layers));
  std::iota(all.begin(), all.end(), 0);
  auto dual = [&](TunerKind mha_kind, TunerKind ffn_kind) {
    UTuningConfig cfg;
    cfg.name = name;
    cfg.layer_range = all;
    cfg.specs = {TunerSpec{OpSite::mha, mha_kind, dim, ScalingKind::channel_wise},
                 TunerSpec{OpSite::ffn, ffn_kind, dim, ScalingKind::channel_wise}};
    return cfg;
  };
  if (name == "default_dual") return dual(TunerKind::p_adapter, TunerKind::p_adapter);
  if (name == "linear_probe") {
    UTuningConfig cfg;
    cfg.name = name;
    return cfg;
  }
  if (name == "deep_prompt") {
    UTuningConfig cfg;
    cfg.name = name;
    cfg.layer_range = all;
    cfg.specs = {TunerSpec{OpSite::mha, TunerKind::p_prompt, dim, ScalingKind::direct}};
    return cfg;
  }
  if (name == "fgvc_cub") return dual(TunerKind::p_prompt, TunerKind::p_adapter);
  if (name == "fgvc_nabirds") return dual(TunerKind::p_adapter, TunerKind::p_prefix);
  if (name == "fgvc_flowers") return dual(TunerKind::p_adapter, TunerKind::p_prompt);
  if (name == "fgvc_cars") return dual(TunerKind::p_adapter, TunerKind::p_adapter);
  if (name == "fgvc_dogs") return dual(TunerKind::p_prefix, TunerKind::p_adapter);
  for (UTuningConfig& cfg : enumerate_ablation_grid(layers, dim)) {
    if (cfg.name == name) return cfg;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace utuning
