#pragma once

#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attnfd/autodiff.hpp"
#include "attnfd/netpbm.hpp"
#include "attnfd/rng.hpp"
#include "attnfd/tensor.hpp"

namespace attnfd {

/// On-disk training state: magic "AFD1", format version, digest + full text
/// of the effective config, named parameter blocks, final metrics. All
/// integers and IEEE-754 payloads are little-endian.
struct Checkpoint {
  enum class Kind : uint8_t { teacher = 0, student = 1 };

  Kind kind = Kind::teacher;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> blocks;
  std::vector<std::pair<std::string, double>> metrics;

  uint64_t digest() const { return fnv1a64(config_text); }

  const Tensor& block(const std::string& name) const {
    for (const auto& [n, t] : blocks)
      if (n == name) return t;
    throw ConsistencyError("checkpoint: missing parameter block '" + name + "'");
  }

  bool has_block(const std::string& name) const {
    for (const auto& [n, t] : blocks)
      if (n == name) return true;
    return false;
  }

  std::optional<double> metric(const std::string& name) const {
    for (const auto& [n, v] : metrics)
      if (n == name) return v;
    return std::nullopt;
  }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char(uint8_t(v >> (8 * i))));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct CkptReader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n)
      throw ParseError(std::string("checkpoint truncated reading ") + what, pos);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return uint8_t(bytes[pos++]);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(bytes[pos + std::size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(bytes[pos + std::size_t(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    uint32_t n = u32(what);
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string out = "AFD1";
  detail::put_u32(out, kCheckpointVersion);
  out.push_back(char(uint8_t(ck.kind)));
  detail::put_u64(out, ck.digest());
  detail::put_u32(out, uint32_t(ck.config_text.size()));
  out += ck.config_text;
  detail::put_u32(out, uint32_t(ck.blocks.size()));
  for (const auto& [name, t] : ck.blocks) {
    detail::put_u32(out, uint32_t(name.size()));
    out += name;
    detail::put_u32(out, uint32_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u32(out, uint32_t(t.extent(i)));
    for (int64_t i = 0; i < t.size(); ++i) detail::put_f64(out, double(t[i]));
  }
  detail::put_u32(out, uint32_t(ck.metrics.size()));
  for (const auto& [name, v] : ck.metrics) {
    detail::put_u32(out, uint32_t(name.size()));
    out += name;
    detail::put_f64(out, v);
  }
  detail::write_file_bytes(path, out);
}

/// Loads and verifies a checkpoint. The stored digest must match the digest
/// of the embedded config text unless `force`.
inline Checkpoint load_checkpoint(const std::string& path, bool force = false) {
  std::string bytes = detail::read_file_bytes(path);
  detail::CkptReader r{bytes};
  r.need(4, "magic");
  if (bytes.compare(0, 4, "AFD1") != 0) throw ParseError("bad checkpoint magic", 0);
  r.pos = 4;
  uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint ck;
  uint8_t kind = r.u8("kind");
  if (kind > 1) throw ParseError("bad checkpoint kind byte", r.pos - 1);
  ck.kind = Checkpoint::Kind(kind);
  uint64_t stored_digest = r.u64("digest");
  ck.config_text = r.str("config text");
  if (!force && stored_digest != ck.digest())
    throw ConsistencyError("checkpoint config digest mismatch in " + path +
                           " (use force to override)");
  uint32_t nblocks = r.u32("block count");
  for (uint32_t b = 0; b < nblocks; ++b) {
    std::string name = r.str("block name");
    uint32_t rank = r.u32("block rank");
    if (rank > 4) throw ParseError("block rank exceeds 4", r.pos - 4);
    std::vector<int> shape;
    int64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t e = r.u32("block extent");
      if (e == 0 || e > (1u << 24)) throw ParseError("bad block extent", r.pos - 4);
      shape.push_back(int(e));
      count *= e;
    }
    std::vector<real> values(std::size_t(count), 0);
    for (auto& v : values) v = real(r.f64("block values"));
    ck.blocks.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  uint32_t nmetrics = r.u32("metric count");
  for (uint32_t m = 0; m < nmetrics; ++m) {
    std::string name = r.str("metric name");
    ck.metrics.emplace_back(std::move(name), r.f64("metric value"));
  }
  return ck;
}

inline void add_param_blocks(Checkpoint& ck,
                             const std::vector<std::pair<std::string, Param*>>& named) {
  for (const auto& [name, p] : named) ck.blocks.emplace_back(name, p->value);
}

/// Copies blocks into parameters by name; shapes must match exactly.
inline void restore_param_blocks(const Checkpoint& ck,
                                 const std::vector<std::pair<std::string, Param*>>& named) {
  for (const auto& [name, p] : named) {
    const Tensor& t = ck.block(name);
    if (!t.same_shape(p->value))
      throw ConsistencyError("checkpoint block '" + name + "' has shape " + t.shape_str() +
                             ", expected " + p->value.shape_str());
    p->value = t;
  }
}

}  // namespace attnfd
