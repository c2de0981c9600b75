#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "polyformer/common.hpp"

namespace polyformer {

// Reverse-mode engine. Forward ops append records to the active tape (a
// Wengert list); backward() replays the records in strict reverse order.
// Leaf tensors (parameters, inputs) live outside the tape and survive
// tape resets; everything recorded is an op output.

template <typename T>
struct NodeT {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient is deposited
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::string name;  // parameter name; empty for non-parameters
  std::function<void()> backward;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class TensorT;

template <typename T>
class TapeT {
 public:
  explicit TapeT(std::uint64_t seed = 0) : seed_(seed) {}

  void record(std::shared_ptr<NodeT<T>> n) { records_.push_back(std::move(n)); }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_op_id() { return op_counter_++; }

  // Runs every record's backward rule exactly once, newest first. Nodes that
  // never received a gradient are skipped.
  void run_backward() {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      NodeT<T>& n = **it;
      if (!n.grad.empty() && n.backward) n.backward();
    }
  }

  static TapeT*& active() {
    thread_local TapeT* tape = nullptr;
    return tape;
  }

 private:
  std::vector<std::shared_ptr<NodeT<T>>> records_;
  std::uint64_t seed_ = 0;
  std::uint64_t op_counter_ = 0;
};

// RAII scope making a tape the recording target for ops on this thread.
template <typename T>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<T>& tape) : prev_(TapeT<T>::active()) {
    TapeT<T>::active() = &tape;
  }
  ~TapeScopeT() { TapeT<T>::active() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<T>* prev_;
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<NodeT<T>> n) : n_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<NodeT<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return filled({1}, v, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  NodeT<T>& node() const { return *n_; }
  const std::shared_ptr<NodeT<T>>& node_ptr() const { return n_; }

  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape[i]; }
  std::size_t numel() const { return n_->value.size(); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& grad() { return n_->grad; }
  const std::vector<T>& grad() const { return n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  const std::string& name() const { return n_->name; }
  void set_name(std::string name) { n_->name = std::move(name); }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() requires a scalar tensor, got shape " + shape_str(n_->shape));
    }
    return n_->value[0];
  }

  void zero_grad() { n_->grad.clear(); }

  // Value copy detached from any graph history.
  TensorT detached() const {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return TensorT(std::move(n));
  }

 private:
  std::shared_ptr<NodeT<T>> n_;
};

// Seeds d(loss)/d(loss) = 1 and replays the active tape backwards. Gradients
// end up on every reachable tensor whose requires_grad is set; frozen tensors
// keep an absent gradient.
template <typename T>
inline void backward(const TensorT<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  TapeT<T>* tape = TapeT<T>::active();
  if (tape == nullptr || tape->empty()) {
    throw ContractError("backward requires a nonempty active tape");
  }
  loss.node().ensure_grad();
  loss.node().grad[0] += T(1);
  tape->run_backward();
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using TapeScope = TapeScopeT<float>;

}  // namespace polyformer
