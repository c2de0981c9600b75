#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "polyformer/model.hpp"
#include "polyformer/optim.hpp"

namespace polyformer {

// One flat key-value config drives every phase; unknown keys are rejected.
struct PhaseConfig {
  Phase phase = Phase::A;
  std::size_t steps = 300;
  std::size_t batch_size = 4;
  AdamWConfig adamw;

  AblationFlags flags;
  std::size_t shots = 5;
  float grl_lambda = 1.0f;

  UNetConfig unet;
  std::size_t poly_prototypes = 16;
  std::size_t poly_modes = 2;
  std::size_t poly_ffn_hidden = 0;

  std::uint64_t seed = 7;
  bool cache_features = true;

  static PhaseConfig defaults_for(Phase p) {
    PhaseConfig cfg;
    cfg.phase = p;
    if (p == Phase::C) cfg.steps = 150;
    return cfg;
  }

  PolyformerConfig poly_config() const {
    PolyformerConfig p;
    p.prototypes = poly_prototypes;
    p.modes = poly_modes;
    p.dim = unet.feature_dim();
    p.ffn_hidden = poly_ffn_hidden;
    return p;
  }

  void validate() const {
    unet.validate();
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (grl_lambda < 0) throw ConfigError("grl_lambda must be >= 0");
    if (phase == Phase::C) {
      if (!flags.use_sup && flags.adv == AdvMode::off) {
        throw ConfigError("phase C without supervision requires the adversarial loss");
      }
      ablation_row_name(flags);  // must be one of the six rows
    }
  }
};

inline std::string adv_mode_name(AdvMode m) {
  switch (m) {
    case AdvMode::off: return "off";
    case AdvMode::features: return "features";
    default: return "masks";
  }
}

inline AdvMode adv_mode_from(const std::string& s) {
  if (s == "off") return AdvMode::off;
  if (s == "features") return AdvMode::features;
  if (s == "masks") return AdvMode::masks;
  throw ConfigError("unknown adv mode: " + s + " (expected off|features|masks)");
}

inline std::string k_scope_name(KScope s) { return s == KScope::k_only ? "k" : "all"; }

inline KScope k_scope_from(const std::string& s) {
  if (s == "k") return KScope::k_only;
  if (s == "all") return KScope::all_weights;
  throw ConfigError("unknown scope: " + s + " (expected k|all)");
}

inline std::string bn_policy_name(BnPolicy p) {
  return p == BnPolicy::full ? "full" : "stats-only";
}

inline BnPolicy bn_policy_from(const std::string& s) {
  if (s == "full") return BnPolicy::full;
  if (s == "stats-only" || s == "stats_only") return BnPolicy::stats_only;
  throw ConfigError("unknown bn policy: " + s + " (expected full|stats-only)");
}

inline nlohmann::json config_to_json(const PhaseConfig& c) {
  return nlohmann::json{{"phase", std::string(1, phase_letter(c.phase))},
                        {"steps", c.steps},
                        {"batch_size", c.batch_size},
                        {"lr", c.adamw.lr},
                        {"weight_decay", c.adamw.weight_decay},
                        {"beta1", c.adamw.beta1},
                        {"beta2", c.adamw.beta2},
                        {"adam_eps", c.adamw.eps},
                        {"use_sup", c.flags.use_sup},
                        {"adv", adv_mode_name(c.flags.adv)},
                        {"scope", k_scope_name(c.flags.scope)},
                        {"bn", bn_policy_name(c.flags.bn)},
                        {"shots", c.shots},
                        {"grl_lambda", c.grl_lambda},
                        {"unet_depth", c.unet.depth},
                        {"unet_base_channels", c.unet.base_channels},
                        {"unet_in_channels", c.unet.in_channels},
                        {"unet_num_classes", c.unet.num_classes},
                        {"poly_prototypes", c.poly_prototypes},
                        {"poly_modes", c.poly_modes},
                        {"poly_ffn_hidden", c.poly_ffn_hidden},
                        {"seed", c.seed},
                        {"cache_features", c.cache_features}};
}

inline PhaseConfig config_from_json(const nlohmann::json& j) {
  PhaseConfig c;
  static const std::set<std::string> known = {
      "phase",          "steps",         "batch_size",       "lr",
      "weight_decay",   "beta1",         "beta2",            "adam_eps",
      "use_sup",        "adv",           "scope",            "bn",
      "shots",          "grl_lambda",    "unet_depth",       "unet_base_channels",
      "unet_in_channels", "unet_num_classes", "poly_prototypes", "poly_modes",
      "poly_ffn_hidden", "seed",         "cache_features"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key: " + key);
    (void)value;
  }
  try {
    if (j.contains("phase")) {
      const auto s = j["phase"].get<std::string>();
      if (s.size() != 1) throw ConfigError("phase must be one of A, B, C");
      c.phase = phase_from_letter(s[0]);
    }
    if (c.phase == Phase::C && !j.contains("steps")) c.steps = 150;
    if (j.contains("steps")) c.steps = j["steps"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("lr")) c.adamw.lr = j["lr"].get<float>();
    if (j.contains("weight_decay")) c.adamw.weight_decay = j["weight_decay"].get<float>();
    if (j.contains("beta1")) c.adamw.beta1 = j["beta1"].get<float>();
    if (j.contains("beta2")) c.adamw.beta2 = j["beta2"].get<float>();
    if (j.contains("adam_eps")) c.adamw.eps = j["adam_eps"].get<float>();
    if (j.contains("use_sup")) c.flags.use_sup = j["use_sup"].get<bool>();
    if (j.contains("adv")) c.flags.adv = adv_mode_from(j["adv"].get<std::string>());
    if (j.contains("scope")) c.flags.scope = k_scope_from(j["scope"].get<std::string>());
    if (j.contains("bn")) c.flags.bn = bn_policy_from(j["bn"].get<std::string>());
    if (j.contains("shots")) c.shots = j["shots"].get<std::size_t>();
    if (j.contains("grl_lambda")) c.grl_lambda = j["grl_lambda"].get<float>();
    if (j.contains("unet_depth")) c.unet.depth = j["unet_depth"].get<std::size_t>();
    if (j.contains("unet_base_channels"))
      c.unet.base_channels = j["unet_base_channels"].get<std::size_t>();
    if (j.contains("unet_in_channels"))
      c.unet.in_channels = j["unet_in_channels"].get<std::size_t>();
    if (j.contains("unet_num_classes"))
      c.unet.num_classes = j["unet_num_classes"].get<std::size_t>();
    if (j.contains("poly_prototypes"))
      c.poly_prototypes = j["poly_prototypes"].get<std::size_t>();
    if (j.contains("poly_modes")) c.poly_modes = j["poly_modes"].get<std::size_t>();
    if (j.contains("poly_ffn_hidden"))
      c.poly_ffn_hidden = j["poly_ffn_hidden"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("cache_features")) c.cache_features = j["cache_features"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return c;
}

inline PhaseConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": invalid config: " + e.what());
  }
  return config_from_json(j);
}

// Digest of the canonical (sorted-key) config dump; recorded in checkpoints,
// logs and reports so any output can be traced to its exact configuration.
inline std::string config_digest(const PhaseConfig& c) {
  return hex64(fnv1a64(config_to_json(c).dump()));
}

}  // namespace polyformer
