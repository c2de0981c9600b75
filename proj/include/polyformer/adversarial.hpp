#pragma once

#include <string>

#include "polyformer/nn.hpp"
#include "polyformer/ops.hpp"

namespace polyformer {

// 5-stage CNN domain discriminator. A gradient reversal layer sits in front
// of every trainable stage, so one backward pass trains the discriminator
// while pushing the generator toward domain-indistinguishable inputs.
template <typename T>
class DiscriminatorT {
 public:
  DiscriminatorT() = default;

  DiscriminatorT(std::size_t in_channels, T lambda, Rng rng) : lambda_(lambda) {
    c1_ = Conv2dT<T>(in_channels, 16, 3, 2, rng);
    c2_ = Conv2dT<T>(16, 32, 3, 2, rng);
    c3_ = Conv2dT<T>(32, 64, 3, 2, rng);
    c4_ = Conv2dT<T>(64, 64, 3, 2, rng);
    c5_ = Conv2dT<T>(64, 1, 3, 1, rng, /*bias=*/true);
    b2_ = BatchNorm2dT<T>(32);
    b3_ = BatchNorm2dT<T>(64);
    b4_ = BatchNorm2dT<T>(64);
  }

  T lambda() const { return lambda_; }
  void set_lambda(T l) { lambda_ = l; }

  // One domain logit per batch item, shape [B,1]. `reverse` exists so tests
  // can compare gradients with the GRL bypassed.
  TensorT<T> forward(const TensorT<T>& x, bool reverse = true) {
    auto h = reverse ? grad_reverse(x, lambda_) : x;
    h = relu(c1_.forward(h));
    h = relu(b2_.forward(c2_.forward(h)));
    h = relu(b3_.forward(c3_.forward(h)));
    h = relu(b4_.forward(c4_.forward(h)));
    return mean_hw(c5_.forward(h));
  }

  void set_bn_mode(BnMode m) {
    b2_.mode = m;
    b3_.mode = m;
    b4_.mode = m;
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    c1_.register_into(ps, prefix + ".s1.conv");
    c2_.register_into(ps, prefix + ".s2.conv");
    b2_.register_into(ps, prefix + ".s2.bn");
    c3_.register_into(ps, prefix + ".s3.conv");
    b3_.register_into(ps, prefix + ".s3.bn");
    c4_.register_into(ps, prefix + ".s4.conv");
    b4_.register_into(ps, prefix + ".s4.bn");
    c5_.register_into(ps, prefix + ".s5.conv");
  }

 private:
  T lambda_ = T(1);
  Conv2dT<T> c1_, c2_, c3_, c4_, c5_;
  BatchNorm2dT<T> b2_, b3_, b4_;
};

// Binary cross-entropy with domain labels source=0, target=1, averaged over
// the items of both batches. In feature mode the inputs are polyformer
// output maps; in mask mode, per-pixel class probabilities.
template <typename T>
TensorT<T> adv_loss(DiscriminatorT<T>& d, const TensorT<T>& source_input,
                    const TensorT<T>& target_input, bool reverse = true) {
  if (!source_input.defined() || !target_input.defined()) {
    throw ContractError("adv_loss: both a source and a target batch are required");
  }
  const auto ns = static_cast<T>(source_input.dim(0));
  const auto nt = static_cast<T>(target_input.dim(0));
  auto ls = bce_logits_mean(d.forward(source_input, reverse), T(0));
  auto lt = bce_logits_mean(d.forward(target_input, reverse), T(1));
  return scale(add(scale(ls, ns), scale(lt, nt)), T(1) / (ns + nt));
}

using Discriminator = DiscriminatorT<float>;

}  // namespace polyformer
