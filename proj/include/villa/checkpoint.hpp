#pragma once

// Checkpoint format (all integers little-endian):
//   "VLLA" | u16 version | u64 config digest |
//   repeated until EOF: u32 name_len | name | u32 rank | u32 dims[rank] | f64 payload[prod(dims)]
// The digest is FNV-1a 64 of ModelConfig::canonical().

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "villa/metrics.hpp"
#include "villa/model.hpp"

namespace villa {

class LoadError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::string_view kCheckpointMagic = "VLLA";
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_digest(const ModelConfig& c) { return fnv1a64(c.canonical()); }

struct Checkpoint {
  std::uint16_t version = kCheckpointVersion;
  std::uint64_t digest = 0;
  std::vector<std::pair<std::string, Array>> tensors;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LoadError("checkpoint: truncated record");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint16_t>(out, ck.version);
  detail::put_le<std::uint64_t>(out, ck.digest);
  for (const auto& [name, a] : ck.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : a.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < kCheckpointMagic.size() || in.take(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw LoadError("checkpoint: bad magic");
  }
  Checkpoint ck;
  ck.version = in.get<std::uint16_t>();
  if (ck.version != kCheckpointVersion) throw LoadError("checkpoint: unsupported version " + std::to_string(ck.version));
  ck.digest = in.get<std::uint64_t>();
  while (!in.done()) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name(in.take(name_len));
    const auto rank = in.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.get<std::uint32_t>());
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = std::bit_cast<double>(in.get<std::uint64_t>());
    ck.tensors.emplace_back(std::move(name), Array(std::move(shape), std::move(values)));
  }
  return ck;
}

inline Checkpoint make_checkpoint(const ModelParams& params) {
  Checkpoint ck;
  ck.digest = config_digest(params.config);
  for_each_param(params.tensors, [&](const std::string& name, const Array& a) { ck.tensors.emplace_back(name, a); });
  return ck;
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(make_checkpoint(params)));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

namespace detail {

inline void copy_from_checkpoint(ModelParams& target, const Checkpoint& ck, bool encoder_only) {
  if (ck.digest != config_digest(target.config)) {
    throw LoadError("checkpoint: config digest mismatch (checkpoint was written for a different model config)");
  }
  std::size_t idx = 0;
  for_each_param(target.tensors, [&](const std::string& name, Array& a) {
    if (idx >= ck.tensors.size() || ck.tensors[idx].first != name) {
      throw LoadError("checkpoint: missing or misordered tensor " + name);
    }
    const Array& src = ck.tensors[idx].second;
    ++idx;
    if (encoder_only && !is_encoder_param(name)) return;
    if (src.shape() != a.shape()) throw LoadError("checkpoint: shape mismatch for " + name);
    a = src;
  });
  if (idx != ck.tensors.size()) throw LoadError("checkpoint: unexpected extra tensors");
}

}  // namespace detail

/// Full parameter restore into a freshly shaped model of `config`.
inline ModelParams load_params(const Checkpoint& ck, const ModelConfig& config) {
  ModelParams m = init_params(config, 0);
  detail::copy_from_checkpoint(m, ck, false);
  return m;
}

/// Copies encoder tensors only; task heads of `target` are left as they are.
inline void load_encoder(ModelParams& target, const Checkpoint& ck) { detail::copy_from_checkpoint(target, ck, true); }

/// FNV-1a over the raw bytes of every encoder tensor, in visiting order.
inline std::uint64_t encoder_checksum(const ModelParams& m) {
  std::string bytes;
  for_each_param(m.tensors, [&](const std::string& name, const Array& a) {
    if (!is_encoder_param(name)) return;
    for (double v : a.data()) detail::put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));
  });
  return fnv1a64(bytes);
}

}  // namespace villa
