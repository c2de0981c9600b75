#pragma once

#include <string>
#include <vector>

#include "polyformer/nn.hpp"
#include "polyformer/ops.hpp"

namespace polyformer {

struct UNetConfig {
  std::size_t depth = 2;
  std::size_t base_channels = 8;
  std::size_t in_channels = 3;
  std::size_t num_classes = 3;

  std::size_t feature_dim() const { return base_channels; }

  void validate() const {
    if (depth < 1) throw ConfigError("unet: depth must be >= 1");
    if (num_classes < 2) throw ConfigError("unet: num_classes must be >= 2");
    if (base_channels < 1) throw ConfigError("unet: base_channels must be >= 1");
  }
};

template <typename T>
struct DoubleConvT {
  Conv2dT<T> c1, c2;
  BatchNorm2dT<T> b1, b2;

  DoubleConvT() = default;
  DoubleConvT(std::size_t in, std::size_t out, Rng& rng)
      : c1(in, out, 3, 1, rng), c2(out, out, 3, 1, rng), b1(out), b2(out) {}

  TensorT<T> forward(const TensorT<T>& x) {
    auto h = relu(b1.forward(c1.forward(x)));
    return relu(b2.forward(c2.forward(h)));
  }

  void set_bn_mode(BnMode m) {
    b1.mode = m;
    b2.mode = m;
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    c1.register_into(ps, prefix + ".conv1");
    b1.register_into(ps, prefix + ".bn1");
    c2.register_into(ps, prefix + ".conv2");
    b2.register_into(ps, prefix + ".bn2");
  }
};

// Encoder-decoder feature extractor (M1) plus 1x1 segmentation head (M2).
// The polyformer slots in between, on the full-resolution D-channel map.
template <typename T>
class UNetT {
 public:
  UNetT() = default;

  UNetT(const UNetConfig& cfg, Rng rng) : cfg_(cfg) {
    cfg.validate();
    inc_ = DoubleConvT<T>(cfg.in_channels, cfg.base_channels, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      const std::size_t cin = cfg.base_channels << i;
      downs_.emplace_back(cin, cin * 2, rng);
    }
    for (std::size_t i = cfg.depth; i-- > 0;) {
      const std::size_t skip = cfg.base_channels << i;
      ups_.emplace_back(skip * 2 + skip, skip, rng);
    }
    head_ = Conv2dT<T>(cfg.base_channels, cfg.num_classes, 1, 1, rng, /*bias=*/true);
  }

  const UNetConfig& config() const { return cfg_; }

  // M1: decoder output at full resolution, width = base_channels.
  TensorT<T> extract_features(const TensorT<T>& x) {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
      throw DimensionError("unet: expected [Bx" + std::to_string(cfg_.in_channels) +
                           "xHxW] input, got " + shape_str(x.shape()));
    }
    const std::size_t div = std::size_t(1) << cfg_.depth;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0) {
      throw DimensionError("unet: H,W of " + shape_str(x.shape()) +
                           " not divisible by 2^depth = " + std::to_string(div));
    }
    std::vector<TensorT<T>> skips;
    auto h = inc_.forward(x);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      skips.push_back(h);
      h = downs_[i].forward(maxpool2d(h));
    }
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      auto up = upsample_bilinear2(h);
      h = ups_[i].forward(concat_channels(skips[cfg_.depth - 1 - i], up));
    }
    return h;
  }

  // M2: raw logits from the feature map.
  TensorT<T> segment(const TensorT<T>& f) {
    if (f.rank() != 4 || f.dim(1) != cfg_.base_channels) {
      throw DimensionError("unet: head expects width " + std::to_string(cfg_.base_channels) +
                           ", got " + shape_str(f.shape()));
    }
    return head_.forward(f);
  }

  TensorT<T> forward(const TensorT<T>& x) { return segment(extract_features(x)); }

  void set_bn_mode(BnMode m) {
    inc_.set_bn_mode(m);
    for (auto& d : downs_) d.set_bn_mode(m);
    for (auto& u : ups_) u.set_bn_mode(m);
  }

  void register_into(ParamSetT<T>& ps, const std::string& prefix) {
    inc_.register_into(ps, prefix + ".inc");
    for (std::size_t i = 0; i < downs_.size(); ++i) {
      downs_[i].register_into(ps, prefix + ".down" + std::to_string(i + 1));
    }
    for (std::size_t i = 0; i < ups_.size(); ++i) {
      ups_[i].register_into(ps, prefix + ".up" + std::to_string(i + 1));
    }
    head_.register_into(ps, prefix + ".head");
  }

 private:
  UNetConfig cfg_;
  DoubleConvT<T> inc_;
  std::vector<DoubleConvT<T>> downs_;
  std::vector<DoubleConvT<T>> ups_;
  Conv2dT<T> head_;
};

// Argmax over the class axis with lowest-index tie-break.
template <typename T>
std::vector<std::uint8_t> argmax_classes(const TensorT<T>& logits) {
  if (logits.rank() != 4) {
    throw DimensionError("argmax_classes: expected [BxCxHxW], got " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0), C = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
  std::vector<std::uint8_t> out(B * HW, 0);
  const T* d = logits.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      T bv = d[(b * C) * HW + p];
      for (std::size_t c = 1; c < C; ++c) {
        const T v = d[(b * C + c) * HW + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[b * HW + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace polyformer
