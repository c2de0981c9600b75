#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "polyformer/tensor.hpp"

namespace polyformer {

// ---------------------------------------------------------------------------
// Raw matmul kernels shared by forward ops and backward rules. All matrices
// are row-major. The *_acc variants accumulate into out.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void mm_nn_acc(T* out, const T* a, const T* b, std::size_t R, std::size_t K,
                      std::size_t S) {
  for (std::size_t r = 0; r < R; ++r) {
    const T* arow = a + r * K;
    T* orow = out + r * S;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + k * S;
      for (std::size_t s = 0; s < S; ++s) orow[s] += av * brow[s];
    }
  }
}

// out[r][s] += sum_k a[r][k] * b[s][k]
template <typename T>
inline void mm_nt_acc(T* out, const T* a, const T* b, std::size_t R, std::size_t K,
                      std::size_t S) {
  for (std::size_t r = 0; r < R; ++r) {
    const T* arow = a + r * K;
    T* orow = out + r * S;
    for (std::size_t s = 0; s < S; ++s) {
      const T* brow = b + s * K;
      T acc = T(0);
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      orow[s] += acc;
    }
  }
}

// out[r][s] += sum_k a[k][r] * b[k][s]
template <typename T>
inline void mm_tn_acc(T* out, const T* a, const T* b, std::size_t K, std::size_t R,
                      std::size_t S) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* arow = a + k * R;
    const T* brow = b + k * S;
    for (std::size_t r = 0; r < R; ++r) {
      const T av = arow[r];
      T* orow = out + r * S;
      for (std::size_t s = 0; s < S; ++s) orow[s] += av * brow[s];
    }
  }
}

template <typename T>
inline TensorT<T> make_op_output(const char* op, Shape shape, std::vector<T> value) {
  auto out = TensorT<T>::from_data(std::move(shape), std::move(value));
  out.node().leaf = false;
  out.node().op = op;
  return out;
}

// Registers the backward rule when recording is active and any input needs a
// gradient. `bwd` is built lazily so inference pays nothing for it.
template <typename T, typename MakeBwd>
inline void finish_op(TensorT<T>& out, bool any_input_grad, MakeBwd make_bwd) {
  TapeT<T>* tape = TapeT<T>::active();
  if (tape == nullptr || !any_input_grad) return;
  out.set_requires_grad(true);
  out.node().backward = make_bwd();
  tape->record(out.node_ptr());
}

template <typename T>
inline void accum(NodeT<T>& n, std::size_t i, T v) {
  n.grad[i] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (same-shape only; no implicit broadcasting)
// ---------------------------------------------------------------------------

template <typename T>
inline void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("add", a, b);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto out = detail::make_op_output("add", a.shape(), std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("sub", a, b);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto out = detail::make_op_output("sub", a.shape(), std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("mul", a, b);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto out = detail::make_op_output("mul", a.shape(), std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->value[i];
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("div", a, b);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] / b.data()[i];
  auto out = detail::make_op_output("div", a.shape(), std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] / bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] -= on->grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
  auto out = detail::make_op_output("scale", a.shape(), std::move(v));
  detail::finish_op(out, a.requires_grad(), [&] {
    auto an = a.node_ptr();
    auto on = out.node_ptr().get();
    return [an, on, c]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    };
  });
  return out;
}

template <typename T>
TensorT<T> add_const(const TensorT<T>& a, T c) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + c;
  auto out = detail::make_op_output("add_const", a.shape(), std::move(v));
  detail::finish_op(out, a.requires_grad(), [&] {
    auto an = a.node_ptr();
    auto on = out.node_ptr().get();
    return [an, on]() {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    };
  });
  return out;
}

// x[j] scaled by gate element s[j]; differentiable in both.
template <typename T>
TensorT<T> scale_by_element(const TensorT<T>& x, const TensorT<T>& s, std::size_t j) {
  if (j >= s.numel()) throw DimensionError("scale_by_element: index out of range");
  const T sv = s.data()[j];
  std::vector<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * sv;
  auto out = detail::make_op_output("scale_by_element", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad() || s.requires_grad(), [&] {
    auto xn = x.node_ptr(), sn = s.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, sn, on, j, sv]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * sv;
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        T acc = T(0);
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * xn->value[i];
        sn->grad[j] += acc;
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Bias broadcasts (the only broadcasting the engine performs)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add_row_bias(const TensorT<T>& x, const TensorT<T>& b) {
  if (x.rank() < 1 || b.rank() != 1 || x.shape().back() != b.dim(0)) {
    throw DimensionError("add_row_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t d = b.dim(0);
  const std::size_t rows = x.numel() / d;
  std::vector<T> v(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) v[r * d + i] = x.data()[r * d + i] + b.data()[i];
  auto out = detail::make_op_output("add_row_bias", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad() || b.requires_grad(), [&] {
    auto xn = x.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, bn, on, rows, d]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < d; ++i) bn->grad[i] += on->grad[r * d + i];
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& b) {
  if (x.rank() != 4 || b.rank() != 1 || x.dim(1) != b.dim(0)) {
    throw DimensionError("add_channel_bias: shape mismatch " + shape_str(x.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> v(x.numel());
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t c = 0; c < C; ++c) {
      const T bv = b.data()[c];
      const std::size_t base = (bi * C + c) * HW;
      for (std::size_t p = 0; p < HW; ++p) v[base + p] = x.data()[base + p] + bv;
    }
  auto out = detail::make_op_output("add_channel_bias", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad() || b.requires_grad(), [&] {
    auto xn = x.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, bn, on, B, C, HW]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t bi = 0; bi < B; ++bi)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (bi * C + c) * HW;
            T acc = T(0);
            for (std::size_t p = 0; p < HW; ++p) acc += on->grad[base + p];
            bn->grad[c] += acc;
          }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t R = a.dim(0), K = a.dim(1), S = b.dim(1);
  std::vector<T> v(R * S, T(0));
  detail::mm_nn_acc(v.data(), a.data().data(), b.data().data(), R, K, S);
  auto out = detail::make_op_output("matmul", {R, S}, std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on, R, K, S]() {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::mm_nt_acc(an->grad.data(), on->grad.data(), bn->value.data(), R, S, K);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::mm_tn_acc(bn->grad.data(), an->value.data(), on->grad.data(), R, K, S);
      }
    };
  });
  return out;
}

// a[R,K] * b[S,K]^T -> [R,S]
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  const std::size_t R = a.dim(0), K = a.dim(1), S = b.dim(0);
  std::vector<T> v(R * S, T(0));
  detail::mm_nt_acc(v.data(), a.data().data(), b.data().data(), R, K, S);
  auto out = detail::make_op_output("matmul_nt", {R, S}, std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on, R, K, S]() {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::mm_nn_acc(an->grad.data(), on->grad.data(), bn->value.data(), R, S, K);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::mm_tn_acc(bn->grad.data(), on->grad.data(), an->value.data(), R, S, K);
      }
    };
  });
  return out;
}

// a[K,R]^T * b[K,S] -> [R,S]
template <typename T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: incompatible shapes " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  }
  const std::size_t K = a.dim(0), R = a.dim(1), S = b.dim(1);
  std::vector<T> v(R * S, T(0));
  detail::mm_tn_acc(v.data(), a.data().data(), b.data().data(), K, R, S);
  auto out = detail::make_op_output("matmul_tn", {R, S}, std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on, K, R, S]() {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::mm_nt_acc(an->grad.data(), bn->value.data(), on->grad.data(), K, S, R);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::mm_nn_acc(bn->grad.data(), an->value.data(), on->grad.data(), K, R, S);
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  std::vector<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  auto out = detail::make_op_output("relu", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on]() {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (xn->value[i] > T(0)) xn->grad[i] += on->grad[i];
    };
  });
  return out;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865476;
  std::vector<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double xv = static_cast<double>(x.data()[i]);
    v[i] = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * kInvSqrt2)));
  }
  auto out = detail::make_op_output("gelu", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on]() {
      constexpr double kInvSqrt2pi = 0.3989422804014327;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double xv = static_cast<double>(xn->value[i]);
        const double cdf = 0.5 * (1.0 + std::erf(xv * 0.7071067811865476));
        const double pdf = kInvSqrt2pi * std::exp(-0.5 * xv * xv);
        xn->grad[i] += on->grad[i] * static_cast<T>(cdf + xv * pdf);
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> exp(const TensorT<T>& x) {
  std::vector<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(x.data()[i]);
  auto out = detail::make_op_output("exp", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on]() {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += on->grad[i] * on->value[i];
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family. Slices along `axis` are normalized with max subtraction.
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit axis_split(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

template <typename T>
TensorT<T> softmax_axis(const TensorT<T>& x, std::size_t axis) {
  const auto sp = detail::axis_split(x.shape(), axis);
  for (const T v : x.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError("softmax_axis: non-finite input");
    }
  }
  std::vector<T> v(x.numel());
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = xd[base];
      for (std::size_t i = 1; i < sp.n; ++i) mx = std::max(mx, xd[base + i * sp.inner]);
      T sum = T(0);
      for (std::size_t i = 0; i < sp.n; ++i) {
        const T e = std::exp(xd[base + i * sp.inner] - mx);
        v[base + i * sp.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < sp.n; ++i) v[base + i * sp.inner] /= sum;
    }
  }
  auto out = detail::make_op_output("softmax_axis", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, sp]() {
      xn->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.n * sp.inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = base + i * sp.inner;
            dot += on->grad[k] * on->value[k];
          }
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = base + i * sp.inner;
            xn->grad[k] += on->value[k] * (on->grad[k] - dot);
          }
        }
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> log_softmax_axis(const TensorT<T>& x, std::size_t axis) {
  const auto sp = detail::axis_split(x.shape(), axis);
  std::vector<T> v(x.numel());
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = xd[base];
      for (std::size_t i = 1; i < sp.n; ++i) mx = std::max(mx, xd[base + i * sp.inner]);
      T sum = T(0);
      for (std::size_t i = 0; i < sp.n; ++i) sum += std::exp(xd[base + i * sp.inner] - mx);
      const T lse = mx + std::log(sum);
      for (std::size_t i = 0; i < sp.n; ++i)
        v[base + i * sp.inner] = xd[base + i * sp.inner] - lse;
    }
  }
  auto out = detail::make_op_output("log_softmax_axis", x.shape(), std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, sp]() {
      xn->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.n * sp.inner + in;
          T gsum = T(0);
          for (std::size_t i = 0; i < sp.n; ++i) gsum += on->grad[base + i * sp.inner];
          for (std::size_t i = 0; i < sp.n; ++i) {
            const std::size_t k = base + i * sp.inner;
            xn->grad[k] += on->grad[k] - std::exp(on->value[k]) * gsum;
          }
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) via im2col + matmul
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void im2col(const T* x, std::size_t Cin, std::size_t H, std::size_t W, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t OH, std::size_t OW,
                   T* cols) {
  // cols layout: [Cin*k*k][OH*OW]
  std::size_t row = 0;
  for (std::size_t c = 0; c < Cin; ++c) {
    const T* xc = x + c * H * W;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw, ++row) {
        T* dst = cols + row * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
            for (std::size_t ow = 0; ow < OW; ++ow) dst[oh * OW + ow] = T(0);
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(ih) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                      static_cast<std::ptrdiff_t>(pad);
            dst[oh * OW + ow] =
                (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) ? T(0) : xrow[iw];
          }
        }
      }
    }
  }
}

template <typename T>
inline void col2im_acc(const T* cols, std::size_t Cin, std::size_t H, std::size_t W,
                       std::size_t k, std::size_t stride, std::size_t pad, std::size_t OH,
                       std::size_t OW, T* x) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < Cin; ++c) {
    T* xc = x + c * H * W;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw, ++row) {
        const T* src = cols + row * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          T* xrow = xc + static_cast<std::size_t>(ih) * W;
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) xrow[iw] += src[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, std::size_t stride = 1,
                  std::size_t pad = 0) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    throw ContractError("conv2d: kernel must be square with odd size, got " +
                        shape_str(w.shape()));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (H + 2 * pad < k || W + 2 * pad < k) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t OH = (H + 2 * pad - k) / stride + 1;
  const std::size_t OW = (W + 2 * pad - k) / stride + 1;
  const std::size_t CK = Cin * k * k;

  std::vector<T> v(B * Cout * OH * OW, T(0));
  std::vector<T> cols(CK * OH * OW);
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col(x.data().data() + b * Cin * H * W, Cin, H, W, k, stride, pad, OH, OW,
                   cols.data());
    detail::mm_nn_acc(v.data() + b * Cout * OH * OW, w.data().data(), cols.data(), Cout, CK,
                      OH * OW);
  }
  auto out = detail::make_op_output("conv2d", {B, Cout, OH, OW}, std::move(v));
  detail::finish_op(out, x.requires_grad() || w.requires_grad(), [&] {
    auto xn = x.node_ptr(), wn = w.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, wn, on, B, Cin, H, W, Cout, k, stride, pad, OH, OW, CK]() {
      std::vector<T> cols(CK * OH * OW);
      std::vector<T> dcols;
      if (xn->requires_grad) {
        xn->ensure_grad();
        dcols.resize(CK * OH * OW);
      }
      if (wn->requires_grad) wn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b) {
        const T* g = on->grad.data() + b * Cout * OH * OW;
        if (wn->requires_grad) {
          detail::im2col(xn->value.data() + b * Cin * H * W, Cin, H, W, k, stride, pad, OH, OW,
                         cols.data());
          // dW += G * cols^T
          detail::mm_nt_acc(wn->grad.data(), g, cols.data(), Cout, OH * OW, CK);
        }
        if (xn->requires_grad) {
          std::fill(dcols.begin(), dcols.end(), T(0));
          // dcols = W^T * G
          detail::mm_tn_acc(dcols.data(), wn->value.data(), g, Cout, CK, OH * OW);
          detail::col2im_acc(dcols.data(), Cin, H, W, k, stride, pad, OH, OW,
                             xn->grad.data() + b * Cin * H * W);
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Spatial resampling
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw DimensionError("maxpool2d: requires 4-d input with even H,W, got " +
                         shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = H / 2, OW = W / 2;
  std::vector<T> v(B * C * OH * OW);
  std::vector<std::uint32_t> arg(v.size());
  const T* xd = x.data().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* plane = xd + bc * H * W;
    T* op = v.data() + bc * OH * OW;
    std::uint32_t* ap = arg.data() + bc * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const std::size_t i0 = (2 * oh) * W + 2 * ow;
        const std::size_t cand[4] = {i0, i0 + 1, i0 + W, i0 + W + 1};
        std::size_t best = cand[0];
        for (int j = 1; j < 4; ++j)
          if (plane[cand[j]] > plane[best]) best = cand[j];
        op[oh * OW + ow] = plane[best];
        ap[oh * OW + ow] = static_cast<std::uint32_t>(best);
      }
    }
  }
  auto out = detail::make_op_output("maxpool2d", {B, C, OH, OW}, std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, arg = std::move(arg), B, C, H, W, OH, OW]() {
      xn->ensure_grad();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        T* gx = xn->grad.data() + bc * H * W;
        const T* g = on->grad.data() + bc * OH * OW;
        const std::uint32_t* ap = arg.data() + bc * OH * OW;
        for (std::size_t p = 0; p < OH * OW; ++p) gx[ap[p]] += g[p];
      }
    };
  });
  return out;
}

// Doubles H and W; half-pixel-center sampling with edge clamping.
template <typename T>
TensorT<T> upsample_bilinear2(const TensorT<T>& x) {
  if (x.rank() != 4) {
    throw DimensionError("upsample_bilinear2: expected 4-d input, got " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = 2 * H, OW = 2 * W;

  auto make_axis = [](std::size_t out_n, std::size_t in_n) {
    std::vector<std::size_t> i0(out_n), i1(out_n);
    std::vector<T> w1(out_n);
    for (std::size_t o = 0; o < out_n; ++o) {
      double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
      if (src < 0) src = 0;
      const double mx = static_cast<double>(in_n - 1);
      if (src > mx) src = mx;
      const auto lo = static_cast<std::size_t>(src);
      i0[o] = lo;
      i1[o] = std::min(lo + 1, in_n - 1);
      w1[o] = static_cast<T>(src - static_cast<double>(lo));
    }
    return std::tuple{i0, i1, w1};
  };
  auto [h0, h1, hw1] = make_axis(OH, H);
  auto [w0, w1i, ww1] = make_axis(OW, W);

  std::vector<T> v(B * C * OH * OW);
  const T* xd = x.data().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* plane = xd + bc * H * W;
    T* op = v.data() + bc * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      const T fy = hw1[oh];
      const T* r0 = plane + h0[oh] * W;
      const T* r1 = plane + h1[oh] * W;
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const T fx = ww1[ow];
        const T top = r0[w0[ow]] * (T(1) - fx) + r0[w1i[ow]] * fx;
        const T bot = r1[w0[ow]] * (T(1) - fx) + r1[w1i[ow]] * fx;
        op[oh * OW + ow] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  auto out = detail::make_op_output("upsample_bilinear2", {B, C, OH, OW}, std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, h0 = h0, h1 = h1, hw1 = hw1, w0 = w0, w1i = w1i, ww1 = ww1, B, C, H, W, OH,
            OW]() {
      xn->ensure_grad();
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        T* gx = xn->grad.data() + bc * H * W;
        const T* g = on->grad.data() + bc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh) {
          const T fy = hw1[oh];
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const T fx = ww1[ow];
            const T gv = g[oh * OW + ow];
            gx[h0[oh] * W + w0[ow]] += gv * (T(1) - fy) * (T(1) - fx);
            gx[h0[oh] * W + w1i[ow]] += gv * (T(1) - fy) * fx;
            gx[h1[oh] * W + w0[ow]] += gv * fy * (T(1) - fx);
            gx[h1[oh] * W + w1i[ow]] += gv * fy * fx;
          }
        }
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  std::vector<T> v(B * (Ca + Cb) * HW);
  for (std::size_t bi = 0; bi < B; ++bi) {
    std::copy_n(a.data().data() + bi * Ca * HW, Ca * HW, v.data() + bi * (Ca + Cb) * HW);
    std::copy_n(b.data().data() + bi * Cb * HW, Cb * HW,
                v.data() + bi * (Ca + Cb) * HW + Ca * HW);
  }
  auto out = detail::make_op_output("concat_channels", {B, Ca + Cb, a.dim(2), a.dim(3)},
                                    std::move(v));
  detail::finish_op(out, a.requires_grad() || b.requires_grad(), [&] {
    auto an = a.node_ptr(), bn = b.node_ptr();
    auto on = out.node_ptr().get();
    return [an, bn, on, B, Ca, Cb, HW]() {
      for (std::size_t bi = 0; bi < B; ++bi) {
        const T* g = on->grad.data() + bi * (Ca + Cb) * HW;
        if (an->requires_grad) {
          an->ensure_grad();
          T* ga = an->grad.data() + bi * Ca * HW;
          for (std::size_t i = 0; i < Ca * HW; ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          T* gb = bn->grad.data() + bi * Cb * HW;
          for (std::size_t i = 0; i < Cb * HW; ++i) gb[i] += g[Ca * HW + i];
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Token layout: feature maps <-> per-item token matrices
// ---------------------------------------------------------------------------

// Item b of x[B,D,H,W] as a token matrix [H*W, D].
template <typename T>
TensorT<T> item_tokens(const TensorT<T>& x, std::size_t b) {
  if (x.rank() != 4 || b >= x.dim(0)) {
    throw DimensionError("item_tokens: bad item index for shape " + shape_str(x.shape()));
  }
  const std::size_t D = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> v(HW * D);
  const T* xb = x.data().data() + b * D * HW;
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t p = 0; p < HW; ++p) v[p * D + d] = xb[d * HW + p];
  auto out = detail::make_op_output("item_tokens", {HW, D}, std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, b, D, HW]() {
      xn->ensure_grad();
      T* gx = xn->grad.data() + b * D * HW;
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t d = 0; d < D; ++d) gx[d * HW + p] += on->grad[p * D + d];
    };
  });
  return out;
}

// Inverse of item_tokens over a whole batch.
template <typename T>
TensorT<T> stack_items(const std::vector<TensorT<T>>& items, std::size_t H, std::size_t W) {
  if (items.empty()) throw ContractError("stack_items: empty batch");
  const std::size_t HW = H * W;
  const std::size_t D = items[0].dim(1);
  bool any_grad = false;
  for (const auto& it : items) {
    if (it.rank() != 2 || it.dim(0) != HW || it.dim(1) != D) {
      throw DimensionError("stack_items: item shape " + shape_str(it.shape()) +
                           " does not match [" + std::to_string(HW) + "x" + std::to_string(D) +
                           "]");
    }
    any_grad = any_grad || it.requires_grad();
  }
  const std::size_t B = items.size();
  std::vector<T> v(B * D * HW);
  for (std::size_t b = 0; b < B; ++b) {
    T* ob = v.data() + b * D * HW;
    const T* src = items[b].data().data();
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t d = 0; d < D; ++d) ob[d * HW + p] = src[p * D + d];
  }
  auto out = detail::make_op_output("stack_items", {B, D, H, W}, std::move(v));
  detail::finish_op(out, any_grad, [&] {
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    parents.reserve(items.size());
    for (const auto& it : items) parents.push_back(it.node_ptr());
    auto on = out.node_ptr().get();
    return [parents = std::move(parents), on, D, HW]() {
      for (std::size_t b = 0; b < parents.size(); ++b) {
        auto& pn = *parents[b];
        if (!pn.requires_grad) continue;
        pn.ensure_grad();
        const T* g = on->grad.data() + b * D * HW;
        for (std::size_t p = 0; p < HW; ++p)
          for (std::size_t d = 0; d < D; ++d) pn.grad[p * D + d] += g[d * HW + p];
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_hw(const TensorT<T>& x) {
  if (x.rank() != 4) {
    throw DimensionError("sum_hw: expected 4-d input, got " + shape_str(x.shape()));
  }
  const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> v(BC, T(0));
  for (std::size_t bc = 0; bc < BC; ++bc) {
    const T* p = x.data().data() + bc * HW;
    T acc = T(0);
    for (std::size_t i = 0; i < HW; ++i) acc += p[i];
    v[bc] = acc;
  }
  auto out = detail::make_op_output("sum_hw", {x.dim(0), x.dim(1)}, std::move(v));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, BC, HW]() {
      xn->ensure_grad();
      for (std::size_t bc = 0; bc < BC; ++bc) {
        const T g = on->grad[bc];
        T* gx = xn->grad.data() + bc * HW;
        for (std::size_t i = 0; i < HW; ++i) gx[i] += g;
      }
    };
  });
  return out;
}

template <typename T>
TensorT<T> mean_hw(const TensorT<T>& x) {
  auto s = sum_hw(x);
  return scale(s, T(1) / static_cast<T>(x.dim(2) * x.dim(3)));
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  T acc = T(0);
  for (const T v : x.data()) acc += v;
  auto out = detail::make_op_output("sum_all", {1}, std::vector<T>{acc});
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on]() {
      xn->ensure_grad();
      const T g = on->grad[0];
      for (auto& gv : xn->grad) gv += g;
    };
  });
  return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Dot product against fixed (non-learned) weights.
template <typename T>
TensorT<T> weighted_sum(const TensorT<T>& x, std::vector<T> w) {
  if (w.size() != x.numel()) {
    throw DimensionError("weighted_sum: weight count " + std::to_string(w.size()) +
                         " vs tensor " + shape_str(x.shape()));
  }
  T acc = T(0);
  for (std::size_t i = 0; i < w.size(); ++i) acc += x.data()[i] * w[i];
  auto out = detail::make_op_output("weighted_sum", {1}, std::vector<T>{acc});
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, w = std::move(w)]() {
      xn->ensure_grad();
      const T g = on->grad[0];
      for (std::size_t i = 0; i < w.size(); ++i) xn->grad[i] += g * w[i];
    };
  });
  return out;
}

// Mean negative log-likelihood of the labeled class at every pixel.
// logp is log-probabilities [B,C,H,W]; labels length B*H*W, row-major.
template <typename T>
TensorT<T> nll_mean(const TensorT<T>& logp, const std::vector<std::uint8_t>& labels) {
  if (logp.rank() != 4) {
    throw DimensionError("nll_mean: expected 4-d log-probs, got " + shape_str(logp.shape()));
  }
  const std::size_t B = logp.dim(0), C = logp.dim(1), HW = logp.dim(2) * logp.dim(3);
  if (labels.size() != B * HW) {
    throw DimensionError("nll_mean: label count " + std::to_string(labels.size()) +
                         " vs expected " + std::to_string(B * HW));
  }
  const T* lp = logp.data().data();
  double acc = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < HW; ++p) {
      const std::uint8_t y = labels[b * HW + p];
      if (y >= C) throw ContractError("nll_mean: label out of range");
      acc += static_cast<double>(lp[(b * C + y) * HW + p]);
    }
  }
  const T inv = T(1) / static_cast<T>(B * HW);
  auto out = detail::make_op_output("nll_mean", {1},
                                    std::vector<T>{static_cast<T>(-acc) * inv});
  detail::finish_op(out, logp.requires_grad(), [&] {
    auto xn = logp.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, labels, B, C, HW, inv]() {
      xn->ensure_grad();
      const T g = on->grad[0] * inv;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < HW; ++p)
          xn->grad[(b * C + labels[b * HW + p]) * HW + p] -= g;
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gradient reversal: identity forward, -lambda on the way back
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> grad_reverse(const TensorT<T>& x, T lambda) {
  if (lambda < T(0)) throw ContractError("grad_reverse: lambda must be non-negative");
  auto out = detail::make_op_output("grad_reverse", x.shape(), std::vector<T>(x.data()));
  detail::finish_op(out, x.requires_grad(), [&] {
    auto xn = x.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, lambda]() {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] -= lambda * on->grad[i];
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization layers' numeric cores
// ---------------------------------------------------------------------------

// Per-row layer norm over the last axis of x[N,D].
template <typename T>
TensorT<T> layer_norm_rows(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                           T eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1)) {
    throw DimensionError("layer_norm_rows: shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(gamma.shape()));
  }
  const std::size_t N = x.dim(0), D = x.dim(1);
  std::vector<T> v(N * D);
  std::vector<T> inv_sd(N), xhat(N * D);
  for (std::size_t r = 0; r < N; ++r) {
    const T* xr = x.data().data() + r * D;
    T mean = T(0);
    for (std::size_t d = 0; d < D; ++d) mean += xr[d];
    mean /= static_cast<T>(D);
    T var = T(0);
    for (std::size_t d = 0; d < D; ++d) {
      const T c = xr[d] - mean;
      var += c * c;
    }
    var /= static_cast<T>(D);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_sd[r] = inv;
    for (std::size_t d = 0; d < D; ++d) {
      const T xh = (xr[d] - mean) * inv;
      xhat[r * D + d] = xh;
      v[r * D + d] = gamma.data()[d] * xh + beta.data()[d];
    }
  }
  auto out = detail::make_op_output("layer_norm", x.shape(), std::move(v));
  detail::finish_op(out,
                    x.requires_grad() || gamma.requires_grad() || beta.requires_grad(), [&] {
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, gn, bn, on, inv_sd = std::move(inv_sd), xhat = std::move(xhat), N, D]() {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t r = 0; r < N; ++r) {
        const T* g = on->grad.data() + r * D;
        const T* xh = xhat.data() + r * D;
        if (gn->requires_grad)
          for (std::size_t d = 0; d < D; ++d) gn->grad[d] += g[d] * xh[d];
        if (bn->requires_grad)
          for (std::size_t d = 0; d < D; ++d) bn->grad[d] += g[d];
        if (xn->requires_grad) {
          T gy_mean = T(0), gyxh_mean = T(0);
          for (std::size_t d = 0; d < D; ++d) {
            const T gy = g[d] * gn->value[d];
            gy_mean += gy;
            gyxh_mean += gy * xh[d];
          }
          gy_mean /= static_cast<T>(D);
          gyxh_mean /= static_cast<T>(D);
          for (std::size_t d = 0; d < D; ++d) {
            const T gy = g[d] * gn->value[d];
            xn->grad[r * D + d] += inv_sd[r] * (gy - gy_mean - xh[d] * gyxh_mean);
          }
        }
      }
    };
  });
  return out;
}

// Batch-statistics normalization of x[B,C,H,W]; `mean`/`var` are the biased
// per-channel statistics of x itself (the backward treats them as functions
// of x).
template <typename T>
TensorT<T> batchnorm_train(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                           const std::vector<T>& mean, const std::vector<T>& var, T eps) {
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> v(x.numel());
  std::vector<T> inv_sd(C);
  for (std::size_t c = 0; c < C; ++c) inv_sd[c] = T(1) / std::sqrt(var[c] + eps);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * HW;
      const T m = mean[c], inv = inv_sd[c], g = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t p = 0; p < HW; ++p) v[base + p] = g * (x.data()[base + p] - m) * inv + bt;
    }
  auto out = detail::make_op_output("batchnorm_train", x.shape(), std::move(v));
  detail::finish_op(out,
                    x.requires_grad() || gamma.requires_grad() || beta.requires_grad(), [&] {
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, gn, bn, on, mean, inv_sd, B, C, HW]() {
      const std::size_t n = B * HW;
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t c = 0; c < C; ++c) {
        const T m = mean[c], inv = inv_sd[c], gam = gn->value[c];
        T gsum = T(0), gxhsum = T(0);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t base = (b * C + c) * HW;
          for (std::size_t p = 0; p < HW; ++p) {
            const T g = on->grad[base + p];
            gsum += g;
            gxhsum += g * (xn->value[base + p] - m) * inv;
          }
        }
        if (gn->requires_grad) gn->grad[c] += gxhsum;
        if (bn->requires_grad) bn->grad[c] += gsum;
        if (xn->requires_grad) {
          const T gmean = gsum / static_cast<T>(n);
          const T gxhmean = gxhsum / static_cast<T>(n);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = (b * C + c) * HW;
            for (std::size_t p = 0; p < HW; ++p) {
              const T xh = (xn->value[base + p] - m) * inv;
              xn->grad[base + p] +=
                  gam * inv * (on->grad[base + p] - gmean - xh * gxhmean);
            }
          }
        }
      }
    };
  });
  return out;
}

// Running-statistics normalization; statistics are constants here.
template <typename T>
TensorT<T> batchnorm_eval(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                          const std::vector<T>& running_mean, const std::vector<T>& running_var,
                          T eps) {
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> inv_sd(C);
  for (std::size_t c = 0; c < C; ++c) inv_sd[c] = T(1) / std::sqrt(running_var[c] + eps);
  std::vector<T> v(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * HW;
      const T m = running_mean[c], inv = inv_sd[c], g = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t p = 0; p < HW; ++p) v[base + p] = g * (x.data()[base + p] - m) * inv + bt;
    }
  auto out = detail::make_op_output("batchnorm_eval", x.shape(), std::move(v));
  detail::finish_op(out,
                    x.requires_grad() || gamma.requires_grad() || beta.requires_grad(), [&] {
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, gn, bn, on, running_mean, inv_sd, B, C, HW]() {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t base = (b * C + c) * HW;
          const T m = running_mean[c], inv = inv_sd[c], gam = gn->value[c];
          for (std::size_t p = 0; p < HW; ++p) {
            const T g = on->grad[base + p];
            if (gn->requires_grad) gn->grad[c] += g * (xn->value[base + p] - m) * inv;
            if (bn->requires_grad) bn->grad[c] += g;
            if (xn->requires_grad) xn->grad[base + p] += g * gam * inv;
          }
        }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// Binary cross-entropy on logits against a constant domain label
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> bce_logits_mean(const TensorT<T>& logits, T label) {
  const std::size_t n = logits.numel();
  if (n == 0) throw ContractError("bce_logits_mean: empty input");
  double acc = 0.0;
  for (const T xv : logits.data()) {
    const double x = static_cast<double>(xv);
    acc += std::max(x, 0.0) - x * static_cast<double>(label) + std::log1p(std::exp(-std::abs(x)));
  }
  auto out = detail::make_op_output("bce_logits_mean", {1},
                                    std::vector<T>{static_cast<T>(acc / static_cast<double>(n))});
  detail::finish_op(out, logits.requires_grad(), [&] {
    auto xn = logits.node_ptr();
    auto on = out.node_ptr().get();
    return [xn, on, label, n]() {
      xn->ensure_grad();
      const T g = on->grad[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(xn->value[i])));
        xn->grad[i] += g * (static_cast<T>(s) - label);
      }
    };
  });
  return out;
}

}  // namespace polyformer
