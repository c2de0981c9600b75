#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "polyformer/polyformer_layer.hpp"
#include "polyformer/unet.hpp"

namespace polyformer {

enum class Phase { none, A, B, C };

inline char phase_letter(Phase p) {
  switch (p) {
    case Phase::A: return 'A';
    case Phase::B: return 'B';
    case Phase::C: return 'C';
    default: return '-';
  }
}

inline Phase phase_from_letter(char c) {
  switch (c) {
    case 'A': return Phase::A;
    case 'B': return Phase::B;
    case 'C': return Phase::C;
    case '-': return Phase::none;
    default: throw ConfigError(std::string("unknown phase: ") + c);
  }
}

enum class AdvMode { off, features, masks };
enum class KScope { k_only, all_weights };
enum class BnPolicy { full, stats_only };

struct AblationFlags {
  bool use_sup = true;
  AdvMode adv = AdvMode::features;
  KScope scope = KScope::k_only;
  BnPolicy bn = BnPolicy::full;
};

// The six adaptation configurations reachable in phase C (Table-style rows).
inline std::string ablation_row_name(const AblationFlags& f) {
  if (f.use_sup && f.adv == AdvMode::features && f.scope == KScope::k_only &&
      f.bn == BnPolicy::full)
    return "L_sup+L_adv+K (standard)";
  if (!f.use_sup && f.adv == AdvMode::features && f.scope == KScope::k_only &&
      f.bn == BnPolicy::full)
    return "L_adv+K";
  if (f.use_sup && f.adv == AdvMode::off && f.scope == KScope::k_only &&
      f.bn == BnPolicy::stats_only)
    return "L_sup+K, w/o BN";
  if (f.use_sup && f.adv == AdvMode::off && f.scope == KScope::k_only && f.bn == BnPolicy::full)
    return "L_sup+K";
  if (f.use_sup && f.adv == AdvMode::features && f.scope == KScope::all_weights &&
      f.bn == BnPolicy::full)
    return "L_sup+L_adv+All weights";
  if (f.use_sup && f.adv == AdvMode::masks && f.scope == KScope::k_only &&
      f.bn == BnPolicy::full)
    return "L_sup+L_adv(mask)+K";
  throw ConfigError("unsupported adaptation flag combination (not one of the six rows)");
}

inline std::vector<AblationFlags> all_ablation_rows() {
  return {
      {true, AdvMode::features, KScope::k_only, BnPolicy::full},      // standard
      {false, AdvMode::features, KScope::k_only, BnPolicy::full},     // L_adv+K
      {true, AdvMode::off, KScope::k_only, BnPolicy::stats_only},     // w/o BN
      {true, AdvMode::off, KScope::k_only, BnPolicy::full},           // L_sup+K
      {true, AdvMode::features, KScope::all_weights, BnPolicy::full}, // all weights
      {true, AdvMode::masks, KScope::k_only, BnPolicy::full},         // mask adv
  };
}

// Backbone plus (optionally) an inserted polyformer layer, with the shared
// parameter registry every phase freezes against.
template <typename T>
class PipelineT {
 public:
  PipelineT() = default;

  explicit PipelineT(const UNetConfig& cfg, std::uint64_t seed)
      : unet_(cfg, Rng(seed).split("unet")) {
    rebuild_registry();
  }

  void insert_polyformer(const PolyformerConfig& pcfg, std::uint64_t seed) {
    if (poly_) throw LifecycleError("polyformer already inserted");
    if (pcfg.dim != unet_.config().feature_dim()) {
      throw ConfigError("polyformer dim " + std::to_string(pcfg.dim) +
                        " does not match backbone feature width " +
                        std::to_string(unet_.config().feature_dim()));
    }
    poly_.emplace(pcfg, Rng(seed).split("polyformer"));
    rebuild_registry();
  }

  bool has_polyformer() const { return poly_.has_value(); }
  UNetT<T>& unet() { return unet_; }
  PolyformerLayerT<T>& poly() {
    if (!poly_) throw LifecycleError("no polyformer inserted");
    return *poly_;
  }
  const PolyformerLayerT<T>& poly() const {
    if (!poly_) throw LifecycleError("no polyformer inserted");
    return *poly_;
  }

  ParamSetT<T>& params() { return params_; }
  const ParamSetT<T>& params() const { return params_; }

  Phase trained_phase() const { return trained_phase_; }
  void set_trained_phase(Phase p) { trained_phase_ = p; }

  TensorT<T> extract_features(const TensorT<T>& x) { return unet_.extract_features(x); }

  TensorT<T> transformed_features(const TensorT<T>& x, Domain d,
                                  AttentionProbe* probe = nullptr) {
    auto f = unet_.extract_features(x);
    if (poly_) f = poly_->forward(f, d, probe);
    return f;
  }

  TensorT<T> forward(const TensorT<T>& x, Domain d = Domain::source,
                     AttentionProbe* probe = nullptr) {
    return unet_.segment(transformed_features(x, d, probe));
  }

  void set_backbone_bn_mode(BnMode m) { unet_.set_bn_mode(m); }

  void init_target_keys() {
    if (trained_phase_ != Phase::B && trained_phase_ != Phase::C) {
      throw LifecycleError("init_target_keys requires a phase-B-trained polyformer");
    }
    poly().init_target_keys();
  }

  void rebuild_registry() {
    params_ = ParamSetT<T>();
    unet_.register_into(params_, "backbone");
    if (poly_) poly_->register_into(params_, "poly");
  }

 private:
  UNetT<T> unet_;
  std::optional<PolyformerLayerT<T>> poly_;
  ParamSetT<T> params_;
  Phase trained_phase_ = Phase::none;
};

using Pipeline = PipelineT<float>;

namespace detail {

inline bool is_backbone_bn_affine(const std::string& name) {
  return name.starts_with("backbone.") && name.find(".bn") != std::string::npos &&
         (name.ends_with(".gamma") || name.ends_with(".beta"));
}

inline bool is_k_target(const std::string& name) {
  return name.starts_with("poly.t1.") && name.ends_with(".k_target");
}

inline bool is_k_source(const std::string& name) {
  return name.starts_with("poly.t1.") && name.ends_with(".k_source");
}

}  // namespace detail

// Names of the parameters a phase is allowed to update (buffers excluded).
template <typename T>
std::vector<std::string> trainable_param_names(const PipelineT<T>& pipeline, Phase phase,
                                               const AblationFlags& flags = {}) {
  std::vector<std::string> out;
  const auto& ps = pipeline.params();
  switch (phase) {
    case Phase::A:
      ps.for_each([&](const std::string& name, const ParamEntryT<T>& e) {
        if (!e.buffer && name.starts_with("backbone.")) out.push_back(name);
      });
      break;
    case Phase::B:
      if (!pipeline.has_polyformer()) {
        throw LifecycleError("phase B requires an inserted polyformer");
      }
      ps.for_each([&](const std::string& name, const ParamEntryT<T>& e) {
        if (!e.buffer && name.starts_with("poly.") && !detail::is_k_target(name)) {
          out.push_back(name);
        }
      });
      break;
    case Phase::C: {
      if (!pipeline.has_polyformer()) {
        throw LifecycleError("phase C requires an inserted polyformer");
      }
      ablation_row_name(flags);  // validates the combination
      ps.for_each([&](const std::string& name, const ParamEntryT<T>& e) {
        if (e.buffer) return;
        if (flags.scope == KScope::k_only) {
          if (detail::is_k_target(name)) out.push_back(name);
        } else {
          // Whole polyformer layer except the frozen source keys.
          if (name.starts_with("poly.") && !detail::is_k_source(name)) out.push_back(name);
        }
        if (flags.bn == BnPolicy::full && detail::is_backbone_bn_affine(name)) {
          out.push_back(name);
        }
      });
      break;
    }
    default:
      throw ConfigError("trainable_param_names: phase must be A, B or C");
  }
  return out;
}

// Applies the phase's freeze plan: requires_grad flags plus BatchNorm modes.
template <typename T>
void configure_phase(PipelineT<T>& pipeline, Phase phase, const AblationFlags& flags = {}) {
  auto names = trainable_param_names(pipeline, phase, flags);
  std::vector<std::string> sorted(names);
  std::sort(sorted.begin(), sorted.end());
  pipeline.params().for_each([&](const std::string& name, ParamEntryT<T>& e) {
    const bool trainable = std::binary_search(sorted.begin(), sorted.end(), name);
    e.tensor.set_requires_grad(trainable && !e.buffer);
  });
  switch (phase) {
    case Phase::A:
      pipeline.set_backbone_bn_mode(BnMode::train);
      break;
    case Phase::B:
      pipeline.set_backbone_bn_mode(BnMode::eval);
      break;
    case Phase::C:
      pipeline.set_backbone_bn_mode(flags.bn == BnPolicy::full ? BnMode::train
                                                               : BnMode::stats_only);
      break;
    default:
      break;
  }
}

// Names allowed to differ bitwise after running the given phase (trainables
// plus the buffers that phase updates). Everything else must match the
// pre-phase snapshot exactly.
template <typename T>
std::vector<std::string> expected_changed_names(const PipelineT<T>& pipeline, Phase phase,
                                                const AblationFlags& flags = {}) {
  auto out = trainable_param_names(pipeline, phase, flags);
  if (phase == Phase::A || phase == Phase::C) {
    pipeline.params().for_each([&](const std::string& name, const ParamEntryT<T>& e) {
      if (e.buffer && name.starts_with("backbone.")) out.push_back(name);
    });
  }
  return out;
}

}  // namespace polyformer
