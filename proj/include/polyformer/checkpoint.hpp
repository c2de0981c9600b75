#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "polyformer/model.hpp"

namespace polyformer {

// Container format "PFRM" v1: little-endian, named f32 tensors sorted by
// name, followed by a JSON metadata blob (phase, step, config digest, RNG
// position). Canonical ordering makes save -> load -> save byte-identical.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
  nlohmann::json meta;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw FormatError(path + ": cannot open for writing");
  }

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void close() {
    out_.flush();
    if (!out_) throw FormatError(path_ + ": write failed");
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw FormatError(path + ": cannot open");
  }

  std::uint8_t u8() {
    const int c = in_.get();
    if (c == EOF) fail("unexpected end of file");
    ++offset_;
    return static_cast<std::uint8_t>(c);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail("unexpected end of file");
    offset_ += n;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path_ + ": " + what + " at byte " + std::to_string(offset_));
  }
  std::size_t offset() const { return offset_; }

 private:
  std::ifstream in_;
  std::string path_;
  std::size_t offset_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  detail::ByteWriter w(path);
  w.bytes("PFRM", 4);
  w.u32(Checkpoint::kVersion);
  w.u64(ckpt.tensors.size());
  for (const auto& [name, entry] : ckpt.tensors) {
    const auto& [shape, data] = entry;
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(0);  // dtype f32
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.u64(d);
    for (float v : data) w.f32(v);
  }
  const std::string meta = ckpt.meta.dump();
  w.u64(meta.size());
  w.bytes(meta.data(), meta.size());
  w.close();
}

inline Checkpoint load_checkpoint(const std::string& path) {
  detail::ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string_view(magic, 4) != "PFRM") r.fail("bad magic (expected PFRM)");
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    r.fail("unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) r.fail("unsupported dtype code " + std::to_string(dtype));
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      numel *= d;
    }
    std::vector<float> data(numel);
    for (auto& v : data) v = r.f32();
    if (!ckpt.tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)))
             .second) {
      r.fail("duplicate tensor name");
    }
  }
  const std::uint64_t meta_len = r.u64();
  std::string meta(meta_len, '\0');
  r.bytes(meta.data(), meta_len);
  try {
    ckpt.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": invalid metadata: " + e.what());
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint bridges. Model tensors live under "model."; training
// auxiliaries (optimizer moments, discriminator) under "opt." / "aux." and
// are ignored by inference-only loads.
// ---------------------------------------------------------------------------

template <typename T>
void put_param_set(Checkpoint& ckpt, const ParamSetT<T>& ps, const std::string& prefix) {
  ps.for_each([&](const std::string& name, const ParamEntryT<T>& e) {
    std::vector<float> data(e.tensor.data().begin(), e.tensor.data().end());
    ckpt.tensors[prefix + name] = {e.tensor.shape(), std::move(data)};
  });
}

// Strict by-name load: every registered tensor must be present with its
// exact shape, and no extra tensor may remain under the prefix.
template <typename T>
void load_param_set(const Checkpoint& ckpt, ParamSetT<T>& ps, const std::string& prefix) {
  std::vector<std::string> missing, shape_mismatch;
  std::size_t consumed = 0;
  ps.for_each([&](const std::string& name, ParamEntryT<T>& e) {
    auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) {
      missing.push_back(prefix + name);
      return;
    }
    ++consumed;
    if (it->second.first != e.tensor.shape()) {
      shape_mismatch.push_back(prefix + name + " " + shape_str(it->second.first) + " vs " +
                               shape_str(e.tensor.shape()));
      return;
    }
    auto& dst = e.tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.second[i]);
  });
  std::vector<std::string> unexpected;
  for (const auto& [name, entry] : ckpt.tensors) {
    if (name.starts_with(prefix) && !ps.has(name.substr(prefix.size()))) {
      unexpected.push_back(name);
    }
  }
  if (!missing.empty() || !shape_mismatch.empty() || !unexpected.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& n : missing) msg += "\n  missing: " + n;
    for (const auto& n : unexpected) msg += "\n  unexpected: " + n;
    for (const auto& n : shape_mismatch) msg += "\n  shape mismatch: " + n;
    throw FormatError(msg);
  }
}

}  // namespace polyformer
