#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "polyformer/nn.hpp"

namespace polyformer {

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

// AdamW with decoupled decay. Decay applies only to entries tagged
// decay=true at registration (weight matrices; never biases, norm
// parameters or prototypes). Parameters without a gradient this step are
// left untouched.
template <typename T>
class AdamWT {
 public:
  AdamWT() = default;
  explicit AdamWT(const AdamWConfig& cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return t_; }

  void step(std::vector<ParamSetT<T>*> sets) {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1), static_cast<double>(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2), static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
    for (auto* ps : sets) {
      ps->for_each([&](const std::string& name, ParamEntryT<T>& e) {
        if (e.buffer || !e.tensor.requires_grad() || !e.tensor.has_grad()) return;
        auto& st = state_[name];
        auto& p = e.tensor.data();
        const auto& g = e.tensor.grad();
        if (st.m.empty()) {
          st.m.assign(p.size(), T(0));
          st.v.assign(p.size(), T(0));
        }
        const T wd = e.decay ? static_cast<T>(cfg_.weight_decay) : T(0);
        for (std::size_t i = 0; i < p.size(); ++i) {
          st.m[i] = b1 * st.m[i] + (T(1) - b1) * g[i];
          st.v[i] = b2 * st.v[i] + (T(1) - b2) * g[i] * g[i];
          const T mhat = st.m[i] / bc1;
          const T vhat = st.v[i] / bc2;
          p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
        }
      });
    }
  }

  void step(ParamSetT<T>& ps) { step(std::vector<ParamSetT<T>*>{&ps}); }

  // Moment tensors and step counter, for checkpointing.
  const std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> moments() const {
    std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> out;
    for (const auto& [name, st] : state_) out.emplace(name, std::make_pair(st.m, st.v));
    return out;
  }

  void restore(std::uint64_t t,
               const std::map<std::string, std::pair<std::vector<T>, std::vector<T>>>& moments) {
    t_ = t;
    state_.clear();
    for (const auto& [name, mv] : moments) state_[name] = State{mv.first, mv.second};
  }

 private:
  struct State {
    std::vector<T> m, v;
  };

  AdamWConfig cfg_;
  std::map<std::string, State> state_;
  std::uint64_t t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace polyformer
