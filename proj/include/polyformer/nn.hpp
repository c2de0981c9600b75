#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "polyformer/common.hpp"
#include "polyformer/ops.hpp"
#include "polyformer/tensor.hpp"

namespace polyformer {

// ---------------------------------------------------------------------------
// Named parameter registry. Parameters carry a weight-decay tag; buffers are
// persistent state (running statistics) that never receive gradients.
// ---------------------------------------------------------------------------

template <typename T>
struct ParamEntryT {
  TensorT<T> tensor;
  bool decay = false;
  bool buffer = false;
};

template <typename T>
class ParamSetT {
 public:
  void add_param(const std::string& name, TensorT<T> t, bool decay) {
    insert(name, ParamEntryT<T>{std::move(t), decay, false});
  }

  void add_buffer(const std::string& name, TensorT<T> t) {
    insert(name, ParamEntryT<T>{std::move(t), false, true});
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  ParamEntryT<T>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }
  const ParamEntryT<T>& at(const std::string& name) const {
    return const_cast<ParamSetT*>(this)->at(name);
  }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (const auto& name : order_) fn(name, map_.at(name));
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& name : order_) fn(name, map_.at(name));
  }

  void zero_grads() {
    for (const auto& name : order_) map_.at(name).tensor.zero_grad();
  }

  // Bitwise value snapshot, used by the freeze ledgers.
  std::unordered_map<std::string, std::vector<T>> snapshot() const {
    std::unordered_map<std::string, std::vector<T>> s;
    for (const auto& name : order_) s.emplace(name, map_.at(name).tensor.data());
    return s;
  }

 private:
  void insert(const std::string& name, ParamEntryT<T> e) {
    if (!map_.emplace(name, std::move(e)).second) {
      throw ContractError("duplicate parameter name: " + name);
    }
    order_.push_back(name);
    map_.at(name).tensor.set_name(name);
  }

  std::vector<std::string> order_;
  std::unordered_map<std::string, ParamEntryT<T>> map_;
};

using ParamSet = ParamSetT<float>;

// Names whose current values differ bitwise from `before`.
template <typename T>
std::vector<std::string> changed_names(const ParamSetT<T>& ps,
                                       const std::unordered_map<std::string, std::vector<T>>& before) {
  std::vector<std::string> out;
  ps.for_each([&](const std::string& name, const ParamEntryT<T>& e) {
    auto it = before.find(name);
    if (it == before.end() || it->second != e.tensor.data()) out.push_back(name);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> normal_init(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return TensorT<T>::from_data(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Linear: y = x W + b, W is [in, out]
// ---------------------------------------------------------------------------

template <typename T>
struct LinearT {
  TensorT<T> w, b;

  LinearT() = default;
  LinearT(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.0) {
    if (stddev == 0.0) stddev = std::sqrt(1.0 / static_cast<double>(in));
    w = normal_init<T>({in, out}, stddev, rng);
    b = TensorT<T>::zeros({out});
  }

  TensorT<T> forward(const TensorT<T>& x) const { return add_row_bias(matmul(x, w), b); }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    ps.add_param(prefix + ".w", w, true);
    ps.add_param(prefix + ".b", b, false);
  }
};

// ---------------------------------------------------------------------------
// Conv2d (square odd kernel), He-initialized
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dT {
  TensorT<T> w;
  std::optional<TensorT<T>> b;
  std::size_t stride = 1, pad = 0;

  Conv2dT() = default;
  Conv2dT(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, Rng& rng,
          bool bias = false)
      : stride(stride_), pad(k / 2) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
    w = normal_init<T>({out, in, k, k}, stddev, rng);
    if (bias) b = TensorT<T>::zeros({out});
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    auto y = conv2d(x, w, stride, pad);
    if (b) y = add_channel_bias(y, *b);
    return y;
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    ps.add_param(prefix + ".w", w, true);
    if (b) ps.add_param(prefix + ".b", *b, false);
  }
};

// ---------------------------------------------------------------------------
// BatchNorm2d with three modes:
//   train      - batch statistics, running stats updated, affine trainable
//   eval       - running statistics, nothing updated
//   stats_only - batch statistics, running stats updated, affine gets no grad
// ---------------------------------------------------------------------------

enum class BnMode { train, eval, stats_only };

template <typename T>
struct BatchNorm2dT {
  TensorT<T> gamma, beta;
  TensorT<T> running_mean, running_var;  // buffers
  T momentum = static_cast<T>(0.1);
  T eps = static_cast<T>(1e-5);
  BnMode mode = BnMode::train;

  BatchNorm2dT() = default;
  explicit BatchNorm2dT(std::size_t channels) {
    gamma = TensorT<T>::filled({channels}, T(1));
    beta = TensorT<T>::zeros({channels});
    running_mean = TensorT<T>::zeros({channels});
    running_var = TensorT<T>::filled({channels}, T(1));
  }

  std::size_t channels() const { return gamma.dim(0); }

  TensorT<T> forward(const TensorT<T>& x) {
    if (x.rank() != 4 || x.dim(1) != channels()) {
      throw DimensionError("batchnorm: expected [Bx" + std::to_string(channels()) +
                           "xHxW], got " + shape_str(x.shape()));
    }
    if (mode == BnMode::eval) {
      return batchnorm_eval(x, gamma, beta, running_mean.data(), running_var.data(), eps);
    }
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const std::size_t n = B * HW;
    if (n < 2) {
      throw ContractError("batchnorm: degenerate batch statistics (B*H*W = " +
                          std::to_string(n) + " < 2)");
    }
    std::vector<T> mean(C, T(0)), var(C, T(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = x.data().data() + (b * C + c) * HW;
        T acc = T(0);
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        mean[c] += acc;
      }
    for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<T>(n);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = x.data().data() + (b * C + c) * HW;
        T acc = T(0);
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = p[i] - mean[c];
          acc += d * d;
        }
        var[c] += acc;
      }
    for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<T>(n);

    // Unbiased variance feeds the running estimate (n >= 2 guaranteed above).
    const T unbias = static_cast<T>(n) / static_cast<T>(n - 1);
    for (std::size_t c = 0; c < C; ++c) {
      running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mean[c];
      running_var.data()[c] =
          (T(1) - momentum) * running_var.data()[c] + momentum * var[c] * unbias;
    }

    if (mode == BnMode::stats_only) {
      // Detached affine copies: same values, no gradient path to gamma/beta.
      return batchnorm_train(x, gamma.detached(), beta.detached(), mean, var, eps);
    }
    return batchnorm_train(x, gamma, beta, mean, var, eps);
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    ps.add_param(prefix + ".gamma", gamma, false);
    ps.add_param(prefix + ".beta", beta, false);
    ps.add_buffer(prefix + ".running_mean", running_mean);
    ps.add_buffer(prefix + ".running_var", running_var);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last axis of [N, D] token matrices
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormT {
  TensorT<T> gamma, beta;
  T eps = static_cast<T>(1e-5);

  LayerNormT() = default;
  explicit LayerNormT(std::size_t dim) {
    gamma = TensorT<T>::filled({dim}, T(1));
    beta = TensorT<T>::zeros({dim});
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    return layer_norm_rows(x, gamma, beta, eps);
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    ps.add_param(prefix + ".gamma", gamma, false);
    ps.add_param(prefix + ".beta", beta, false);
  }
};

// ---------------------------------------------------------------------------
// Feed-forward D -> hidden -> D
// ---------------------------------------------------------------------------

enum class Activation { relu, gelu };

template <typename T>
struct FeedForwardT {
  LinearT<T> fc1, fc2;
  Activation act = Activation::gelu;

  FeedForwardT() = default;
  FeedForwardT(std::size_t dim, std::size_t hidden, Activation a, Rng& rng) : act(a) {
    fc1 = LinearT<T>(dim, hidden, rng, std::sqrt(2.0 / static_cast<double>(dim)));
    fc2 = LinearT<T>(hidden, dim, rng, std::sqrt(2.0 / static_cast<double>(hidden)));
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != fc1.w.dim(0)) {
      throw DimensionError("ffn: expected width " + std::to_string(fc1.w.dim(0)) + ", got " +
                           shape_str(x.shape()));
    }
    auto h = fc1.forward(x);
    h = (act == Activation::relu) ? relu(h) : gelu(h);
    return fc2.forward(h);
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    fc1.register_into(ps, prefix + ".fc1");
    fc2.register_into(ps, prefix + ".fc2");
  }
};

// ---------------------------------------------------------------------------
// Gradient reversal layer
// ---------------------------------------------------------------------------

template <typename T>
struct GradientReversalT {
  T lambda = T(1);

  TensorT<T> forward(const TensorT<T>& x) const { return grad_reverse(x, lambda); }
};

}  // namespace polyformer
