#pragma once

#include <string>
#include <vector>

#include "polyformer/nn.hpp"
#include "polyformer/ops.hpp"
#include "polyformer/tensor.hpp"

namespace polyformer {

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

struct PolyformerConfig {
  std::size_t prototypes = 16;  // M
  std::size_t modes = 2;        // N_m
  std::size_t dim = 8;          // D, must match the backbone feature width
  std::size_t ffn_hidden = 0;   // 0 -> 2*dim
};

// Collects the per-mode attention weight matrices of the last forward pass
// when attached. Squeeze weights are [N,M] normalized over N (columns);
// expand weights are [N,M] normalized over M (rows).
struct AttentionProbe {
  std::vector<std::vector<float>> squeeze_weights;
  std::vector<std::vector<float>> expand_weights;
  std::size_t n = 0, m = 0;
};

// Frozen source keys and their adaptable target copies, one matrix per mode
// of the squeeze attention.
template <typename T>
struct KProjectionPairT {
  std::vector<TensorT<T>> k_source;
  std::vector<TensorT<T>> k_target;
  bool target_ready = false;

  const std::vector<TensorT<T>>& active(Domain d) const {
    if (d == Domain::target) {
      if (!target_ready) {
        throw LifecycleError("target keys requested before init_target_keys");
      }
      return k_target;
    }
    return k_source;
  }
};

// One expanded-attention sub-transformer: N_m modes with independent Q/V
// (keys either owned or supplied by a KProjectionPair), a learned softmax
// gate over modes, output projection, layer norm(s) and an FFN.
template <typename T>
struct SubTransformerT {
  std::vector<TensorT<T>> q;
  std::vector<TensorT<T>> v;
  std::vector<TensorT<T>> k;  // empty when keys come from the pair
  TensorT<T> gate;            // [modes]
  TensorT<T> w_o;             // [D,D]
  LayerNormT<T> ln1;
  std::optional<LayerNormT<T>> ln2;  // squeeze block only
  FeedForwardT<T> ffn;
};

template <typename T>
class PolyformerLayerT {
 public:
  PolyformerLayerT() = default;

  PolyformerLayerT(const PolyformerConfig& cfg, Rng rng) : cfg_(cfg) {
    if (cfg.prototypes < 1) throw ConfigError("polyformer: prototype count must be >= 1");
    if (cfg.modes < 1) throw ConfigError("polyformer: mode count must be >= 1");
    if (cfg_.ffn_hidden == 0) cfg_.ffn_hidden = 2 * cfg_.dim;
    const std::size_t D = cfg_.dim;
    const double sd = std::sqrt(1.0 / static_cast<double>(D));

    prototypes_ = normal_init<T>({cfg_.prototypes, D}, sd, rng);

    auto make_sub = [&](bool squeeze_block) {
      SubTransformerT<T> st;
      for (std::size_t m = 0; m < cfg_.modes; ++m) {
        st.q.push_back(normal_init<T>({D, D}, sd, rng));
        st.v.push_back(normal_init<T>({D, D}, sd, rng));
      }
      st.gate = TensorT<T>::zeros({cfg_.modes});
      st.ln1 = LayerNormT<T>(D);
      st.ffn = FeedForwardT<T>(D, cfg_.ffn_hidden, Activation::gelu, rng);
      if (squeeze_block) {
        st.w_o = normal_init<T>({D, D}, sd, rng);
        st.ln2 = LayerNormT<T>(D);
      } else {
        // Zero output projection makes the freshly inserted layer an exact
        // identity around the residual.
        st.w_o = TensorT<T>::zeros({D, D});
      }
      return st;
    };

    t1_ = make_sub(true);
    for (std::size_t m = 0; m < cfg_.modes; ++m) {
      kpair_.k_source.push_back(normal_init<T>({D, D}, sd, rng));
      kpair_.k_target.push_back(TensorT<T>::zeros({D, D}));
    }
    t2_ = make_sub(false);
    for (std::size_t m = 0; m < cfg_.modes; ++m) {
      t2_.k.push_back(normal_init<T>({D, D}, sd, rng));
    }
  }

  const PolyformerConfig& config() const { return cfg_; }
  TensorT<T>& prototypes() { return prototypes_; }
  SubTransformerT<T>& t1() { return t1_; }
  SubTransformerT<T>& t2() { return t2_; }
  KProjectionPairT<T>& kpair() { return kpair_; }
  const KProjectionPairT<T>& kpair() const { return kpair_; }

  // Squeeze attention: prototypes aggregate the N feature tokens; each
  // attention column is a convex combination over features.
  TensorT<T> squeeze(const TensorT<T>& f, Domain domain, AttentionProbe* probe = nullptr) const {
    check_tokens("squeeze", f);
    const auto& keys = kpair_.active(domain);
    auto gate_sm = softmax_axis(t1_.gate, 0);
    TensorT<T> fused;
    for (std::size_t m = 0; m < cfg_.modes; ++m) {
      auto fk = matmul(f, keys[m]);
      auto cq = matmul(prototypes_, t1_.q[m]);
      auto scores = matmul_nt(fk, cq);          // [N,M]
      auto attn = softmax_axis(scores, 0);      // normalize over features
      if (probe) {
        probe->n = f.dim(0);
        probe->m = cfg_.prototypes;
        probe->squeeze_weights.emplace_back(attn.data().begin(), attn.data().end());
      }
      auto fv = matmul(f, t1_.v[m]);
      auto fused_m = scale_by_element(matmul_tn(attn, fv), gate_sm, m);  // [M,D]
      fused = fused.defined() ? add(fused, fused_m) : fused_m;
    }
    auto h1 = t1_.ln1.forward(add(prototypes_, matmul(fused, t1_.w_o)));
    return t1_.ln2->forward(add(h1, t1_.ffn.forward(h1)));
  }

  // Expand attention: tokens read back from the transformed prototypes; each
  // attention row mixes prototypes. The Eq-style residual keeps the layer an
  // exact identity while w_o is zero.
  TensorT<T> expand(const TensorT<T>& ctilde, const TensorT<T>& f,
                    AttentionProbe* probe = nullptr) const {
    check_tokens("expand", f);
    if (ctilde.rank() != 2 || ctilde.dim(1) != cfg_.dim) {
      throw DimensionError("expand: prototype width mismatch " + shape_str(ctilde.shape()));
    }
    auto gate_sm = softmax_axis(t2_.gate, 0);
    TensorT<T> mixed;
    for (std::size_t m = 0; m < cfg_.modes; ++m) {
      auto fq = matmul(f, t2_.q[m]);
      auto ck = matmul(ctilde, t2_.k[m]);
      auto scores = matmul_nt(fq, ck);          // [N,M]
      auto attn = softmax_axis(scores, 1);      // normalize over prototypes
      if (probe) {
        probe->expand_weights.emplace_back(attn.data().begin(), attn.data().end());
      }
      auto cv = matmul(ctilde, t2_.v[m]);
      auto mixed_m = scale_by_element(matmul(attn, cv), gate_sm, m);  // [N,D]
      mixed = mixed.defined() ? add(mixed, mixed_m) : mixed_m;
    }
    auto u = matmul(mixed, t2_.w_o);
    auto z = add(u, t2_.ffn.forward(t2_.ln1.forward(u)));
    return add(z, f);
  }

  // Flatten -> squeeze -> expand -> unflatten, each batch item independently.
  TensorT<T> forward(const TensorT<T>& fmap, Domain domain,
                     AttentionProbe* probe = nullptr) const {
    if (fmap.rank() != 4 || fmap.dim(1) != cfg_.dim) {
      throw DimensionError("polyformer: expected [Bx" + std::to_string(cfg_.dim) +
                           "xHxW] features, got " + shape_str(fmap.shape()));
    }
    std::vector<TensorT<T>> items;
    items.reserve(fmap.dim(0));
    for (std::size_t b = 0; b < fmap.dim(0); ++b) {
      auto f = item_tokens(fmap, b);
      auto ct = squeeze(f, domain, probe);
      items.push_back(expand(ct, f, probe));
    }
    return stack_items(items, fmap.dim(2), fmap.dim(3));
  }

  // K^s -> K^t copy; the source keys are left behind as the frozen reference.
  void init_target_keys() {
    for (std::size_t m = 0; m < cfg_.modes; ++m) {
      kpair_.k_target[m].data() = kpair_.k_source[m].data();
    }
    kpair_.target_ready = true;
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    ps.add_param(prefix + ".prototypes.c", prototypes_, false);
    register_sub(ps, prefix + ".t1", t1_, &kpair_);
    register_sub(ps, prefix + ".t2", t2_, nullptr);
  }

 private:
  void check_tokens(const char* op, const TensorT<T>& f) const {
    if (f.rank() != 2 || f.dim(1) != cfg_.dim) {
      throw DimensionError(std::string(op) + ": expected [Nx" + std::to_string(cfg_.dim) +
                           "] tokens, got " + shape_str(f.shape()));
    }
    if (f.dim(0) == 0) throw ContractError(std::string(op) + ": empty token input");
  }

  void register_sub(ParamSetT<T>& ps, const std::string& prefix, SubTransformerT<T>& st,
                    KProjectionPairT<T>* pair) {
    for (std::size_t m = 0; m < cfg_.modes; ++m) {
      const std::string mp = prefix + ".m" + std::to_string(m);
      ps.add_param(mp + ".q", st.q[m], true);
      ps.add_param(mp + ".v", st.v[m], true);
      if (pair) {
        ps.add_param(mp + ".k_source", pair->k_source[m], true);
        ps.add_param(mp + ".k_target", pair->k_target[m], true);
      } else {
        ps.add_param(mp + ".k", st.k[m], true);
      }
    }
    ps.add_param(prefix + ".gate", st.gate, false);
    ps.add_param(prefix + ".w_o", st.w_o, true);
    st.ln1.register_into(ps, prefix + ".ln1");
    if (st.ln2) st.ln2->register_into(ps, prefix + ".ln2");
    st.ffn.register_into(ps, prefix + ".ffn");
  }

  PolyformerConfig cfg_;
  TensorT<T> prototypes_;
  SubTransformerT<T> t1_, t2_;
  KProjectionPairT<T> kpair_;
};

}  // namespace polyformer
