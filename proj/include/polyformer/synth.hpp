#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyformer/image_io.hpp"

namespace polyformer {

enum class DomainTag { source, target };

inline const char* domain_tag_name(DomainTag t) {
  return t == DomainTag::source ? "source" : "target";
}

inline DomainTag domain_tag_from(const std::string& s) {
  if (s == "source") return DomainTag::source;
  if (s == "target") return DomainTag::target;
  throw ConfigError("unknown domain tag: " + s);
}

// Appearance of one domain. The mask geometry stream depends only on
// (seed_base, index), so two specs sharing a seed_base produce identical
// label maps and differ purely in appearance (covariate shift).
struct DomainSpec {
  double brightness_shift = 0.0;   // [-0.5, 0.5]
  double contrast_scale = 1.0;     // [0.5, 2]
  std::array<double, 3> channel_tint{0.0, 0.0, 0.0};
  double noise_std = 0.02;
  double texture_freq = 3.0;
  std::uint64_t seed_base = 7;

  static DomainSpec default_source() { return DomainSpec{}; }

  static DomainSpec default_target() {
    DomainSpec s;
    s.brightness_shift = -0.25;
    s.contrast_scale = 0.8;
    s.channel_tint = {0.1, 0.0, 0.0};
    s.noise_std = 0.03;
    return s;
  }
};

struct Sample {
  Tensor image;  // [3,H,W] in [0,1]
  Mask mask;     // classes: 0 background, 1 disc ring, 2 cup
  DomainTag domain = DomainTag::source;
  std::string id;
};

constexpr std::uint8_t kBackground = 0;
constexpr std::uint8_t kDisc = 1;
constexpr std::uint8_t kCup = 2;

// Concentric-ellipse sample: an elliptic "disc" containing a strictly
// smaller "cup", over a textured background, with the domain's appearance
// transform applied to the image only.
inline Sample generate_sample(const DomainSpec& spec, std::size_t index,
                              DomainTag tag = DomainTag::source, std::size_t H = 64,
                              std::size_t W = 64) {
  Rng geo = Rng(spec.seed_base).split("geometry").split(index);
  Rng app = Rng(spec.seed_base).split("appearance").split(index);

  const double cx = geo.uniform(0.38, 0.62) * static_cast<double>(W);
  const double cy = geo.uniform(0.38, 0.62) * static_cast<double>(H);
  const double ax = geo.uniform(0.16, 0.26) * static_cast<double>(W);
  const double ay = geo.uniform(0.16, 0.26) * static_cast<double>(H);
  const double theta = geo.uniform(0.0, 3.141592653589793);
  const double cup_scale = geo.uniform(0.42, 0.62);
  // Offset small enough to keep the cup strictly inside the disc.
  const double max_off = (1.0 - cup_scale) * std::min(ax, ay) * 0.4;
  const double ox = geo.uniform(-max_off, max_off);
  const double oy = geo.uniform(-max_off, max_off);
  const double ct = std::cos(theta), st = std::sin(theta);

  auto ellipse_r2 = [&](double px, double py, double ecx, double ecy, double eax,
                        double eay) {
    const double dx = px - ecx, dy = py - ecy;
    const double u = dx * ct + dy * st;
    const double v = -dx * st + dy * ct;
    return (u / eax) * (u / eax) + (v / eay) * (v / eay);
  };

  const double phase_x = geo.uniform(0.0, 6.283185307179586);
  const double phase_y = geo.uniform(0.0, 6.283185307179586);

  Sample s;
  s.domain = tag;
  s.id = std::string(domain_tag_name(tag)) + "_" + std::to_string(index);
  s.mask.h = H;
  s.mask.w = W;
  s.mask.v.assign(H * W, kBackground);
  std::vector<float> img(3 * H * W);

  const double f = spec.texture_freq;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double rd = ellipse_r2(px, py, cx, cy, ax, ay);
      const double rc = ellipse_r2(px, py, cx + ox, cy + oy, ax * cup_scale, ay * cup_scale);
      double base;
      if (rc <= 1.0) {
        s.mask.v[y * W + x] = kCup;
        base = 0.92;
      } else if (rd <= 1.0) {
        s.mask.v[y * W + x] = kDisc;
        base = 0.72;
      } else {
        base = 0.45 + 0.08 * std::sin(6.283185307179586 * f * px / static_cast<double>(W) +
                                      phase_x) *
                          std::cos(6.283185307179586 * f * py / static_cast<double>(H) +
                                   phase_y);
      }
      // Slight fixed channel structure before the domain transform.
      const std::array<double, 3> channel_gain{1.0, 0.94, 0.88};
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base * channel_gain[c];
        v = spec.contrast_scale * (v - 0.5) + 0.5;
        v += spec.brightness_shift + spec.channel_tint[c];
        v += spec.noise_std * app.normal();
        img[(c * H + y) * W + x] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
    }
  }
  s.image = Tensor::from_data({3, H, W}, std::move(img));
  return s;
}

using Dataset = std::vector<Sample>;

inline Dataset generate_dataset(const DomainSpec& spec, std::size_t count, DomainTag tag,
                                std::size_t H = 64, std::size_t W = 64) {
  Dataset ds;
  ds.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.push_back(generate_sample(spec, i, tag, H, W));
  return ds;
}

// Uniform split without replacement: k training shots, the rest held out.
// Deterministic in `seed`; both halves keep ascending dataset order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> few_shot_split(
    std::size_t dataset_size, std::size_t k, std::uint64_t seed) {
  if (k < 1 || k >= dataset_size) {
    throw ContractError("few_shot_split: k = " + std::to_string(k) +
                        " must satisfy 1 <= k < " + std::to_string(dataset_size));
  }
  std::vector<std::size_t> idx(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) idx[i] = i;
  Rng rng = Rng(seed).split("few_shot_split");
  rng.shuffle(idx);
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<std::size_t> rest(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  std::sort(train.begin(), train.end());
  std::sort(rest.begin(), rest.end());
  return {std::move(train), std::move(rest)};
}

// ---------------------------------------------------------------------------
// On-disk datasets: PPM/PGM files plus one manifest listing ids, paths and
// domain tags.
// ---------------------------------------------------------------------------

inline void save_sample(const Sample& s, const std::string& image_path,
                        const std::string& mask_path) {
  save_ppm(image_path, s.image);
  save_pgm(mask_path, s.mask);
}

inline Sample load_sample(const std::string& image_path, const std::string& mask_path,
                          DomainTag tag, const std::string& id) {
  Sample s;
  s.image = load_ppm(image_path);
  s.mask = load_pgm(mask_path);
  s.domain = tag;
  s.id = id;
  return s;
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  nlohmann::json manifest;
  manifest["samples"] = nlohmann::json::array();
  for (const auto& s : ds) {
    const std::string image_rel = "images/" + s.id + ".ppm";
    const std::string mask_rel = "masks/" + s.id + ".pgm";
    save_sample(s, (fs::path(dir) / image_rel).string(), (fs::path(dir) / mask_rel).string());
    manifest["samples"].push_back({{"id", s.id},
                                   {"image", image_rel},
                                   {"mask", mask_rel},
                                   {"domain", domain_tag_name(s.domain)}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw FormatError(dir + ": cannot write manifest");
  out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& manifest_path,
                            std::optional<DomainTag> filter = std::nullopt) {
  namespace fs = std::filesystem;
  fs::path mpath(manifest_path);
  if (fs::is_directory(mpath)) mpath /= "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw FormatError(mpath.string() + ": cannot open manifest");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": invalid manifest: " + e.what());
  }
  if (!manifest.contains("samples") || !manifest["samples"].is_array()) {
    throw FormatError(mpath.string() + ": manifest missing 'samples' array");
  }
  const fs::path dir = mpath.parent_path();
  Dataset ds;
  for (const auto& e : manifest["samples"]) {
    const DomainTag tag = domain_tag_from(e.at("domain").get<std::string>());
    if (filter && tag != *filter) continue;
    ds.push_back(load_sample((dir / e.at("image").get<std::string>()).string(),
                             (dir / e.at("mask").get<std::string>()).string(), tag,
                             e.at("id").get<std::string>()));
  }
  return ds;
}

// Batch of images [B,3,H,W] plus row-major labels, in dataset index order.
inline std::pair<Tensor, std::vector<std::uint8_t>> assemble_batch(
    const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("assemble_batch: empty index list");
  const auto& first = ds.at(indices[0]);
  const std::size_t C = first.image.dim(0), H = first.image.dim(1), W = first.image.dim(2);
  std::vector<float> img(indices.size() * C * H * W);
  std::vector<std::uint8_t> labels(indices.size() * H * W);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = ds.at(indices[b]);
    if (s.image.shape() != first.image.shape()) {
      throw DimensionError("assemble_batch: inconsistent image shapes in dataset");
    }
    std::copy(s.image.data().begin(), s.image.data().end(), img.begin() + b * C * H * W);
    std::copy(s.mask.v.begin(), s.mask.v.end(), labels.begin() + b * H * W);
  }
  return {Tensor::from_data({indices.size(), C, H, W}, std::move(img)), std::move(labels)};
}

}  // namespace polyformer
