// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint, all integers little-endian:
//
//   "RASM"  u32 version
//   u32 config_len, config text (UTF-8 key = value lines)
//   u64 global_step
//   u32 n_params, then n_params tensor records
//   u8  has_optimizer; if 1: u64 optimizer_step, u32 n_moments, then per
//       moment entry: tensor record "m/<path>" followed by "v/<path>"
//
// tensor record: u32 path_len, path, u8 dtype (1 = f32, 2 = f64),
//                u32 rank, u64 dims[rank], numel little-endian values
#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "rasm/optim.hpp"

namespace rasm {

inline constexpr char kCheckpointMagic[4] = {'R', 'A', 'S', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "checkpoints store float or double");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  ParameterSet<T> params;
  std::optional<AdamState<T>> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    using Un = std::make_unsigned_t<U>;
    auto u = static_cast<Un>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(char((u >> (8 * i)) & 0xff));
  }
  void put_float(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_float(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { bytes_ += s; }
  void str(const std::string& s) {
    put(std::uint32_t(s.size()));
    raw(s);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  template <typename U>
  U get() {
    static_assert(std::is_integral_v<U>);
    need(sizeof(U));
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= std::make_unsigned_t<U>(std::uint8_t(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }
  double get_float(DType t) {
    return t == DType::f32 ? double(std::bit_cast<float>(get<std::uint32_t>())) : std::bit_cast<double>(get<std::uint64_t>());
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(get<std::uint32_t>()); }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("corrupt checkpoint " + source_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("unexpected end of data");
  }
  std::string bytes_, source_;
  std::size_t pos_ = 0;
};

template <typename T>
void write_tensor(ByteWriter& w, const std::string& path, const Shape& shape, std::span<const T> values) {
  w.str(path);
  w.put(std::uint8_t(dtype_of<T>()));
  w.put(std::uint32_t(shape.size()));
  for (auto d : shape) w.put(std::uint64_t(d));
  for (T v : values) w.put_float(v);
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(ByteReader& r) {
  std::string path = r.str();
  const auto tag = r.get<std::uint8_t>();
  if (tag != std::uint8_t(DType::f32) && tag != std::uint8_t(DType::f64)) r.fail("unknown dtype tag " + std::to_string(tag));
  const auto rank = r.get<std::uint32_t>();
  if (rank == 0 || rank > 8) r.fail("bad rank " + std::to_string(rank) + " for " + path);
  Shape shape(rank);
  std::uint64_t numel = 1;
  for (auto& d : shape) {
    const auto v = r.get<std::uint64_t>();
    if (v == 0 || v > (std::uint64_t(1) << 32)) r.fail("bad dimension for " + path);
    d = std::size_t(v);
    numel *= v;
    if (numel > (std::uint64_t(1) << 34)) r.fail("tensor too large: " + path);
  }
  std::vector<T> data(numel);
  for (auto& v : data) v = T(r.get_float(DType(tag)));
  return {std::move(path), Tensor<T>(std::move(shape), std::move(data))};
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const Checkpoint<T>& ck) {
  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, 4));
  w.put(kCheckpointVersion);
  w.str(format_config(ck.config));
  w.put(std::uint64_t(ck.step));
  w.put(std::uint32_t(ck.params.size()));
  for (const auto& [path, t] : ck.params) detail::write_tensor<T>(w, path, t.shape(), t.data());
  w.put(std::uint8_t(ck.optimizer ? 1 : 0));
  if (ck.optimizer) {
    const auto& opt = *ck.optimizer;
    w.put(std::uint64_t(opt.step));
    w.put(std::uint32_t(opt.m.size()));
    for (const auto& [path, m] : opt.m) {
      const auto& shape = ck.params.contains(path) ? ck.params.at(path).shape() : Shape{m.size()};
      detail::write_tensor<T>(w, "m/" + path, shape, m);
      detail::write_tensor<T>(w, "v/" + path, shape, opt.v.at(path));
    }
  }
  return w.bytes();
}

/// Values stored with the other dtype are converted to T.
template <typename T>
Checkpoint<T> deserialize_checkpoint(std::string bytes, const std::string& source = "<memory>") {
  detail::ByteReader r(std::move(bytes), source);
  if (r.raw(4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic): " + source);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw UnsupportedFormatError("unsupported checkpoint version " + std::to_string(version) + " in " + source);
  }
  Checkpoint<T> ck;
  ck.config = parse_config(r.str());
  ck.step = r.get<std::uint64_t>();
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [path, t] = detail::read_tensor<T>(r);
    ck.params.add(path, std::move(t));
  }
  const auto has_opt = r.get<std::uint8_t>();
  if (has_opt > 1) r.fail("bad optimizer flag");
  if (has_opt) {
    AdamState<T> opt;
    opt.step = r.get<std::uint64_t>();
    const auto k = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < k; ++i) {
      auto [mp, m] = detail::read_tensor<T>(r);
      auto [vp, v] = detail::read_tensor<T>(r);
      if (mp.rfind("m/", 0) != 0 || vp != "v/" + mp.substr(2)) r.fail("mismatched moment records " + mp + ", " + vp);
      opt.m[mp.substr(2)] = m.vec();
      opt.v[mp.substr(2)] = v.vec();
    }
    ck.optimizer = std::move(opt);
  }
  if (!r.done()) r.fail("trailing bytes");
  return ck;
}

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  // Write-then-rename so an interrupted save never clobbers the previous file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    const auto bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("cannot write checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw FileNotFoundError("checkpoint not found: " + path);
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint<T>(ss.str(), path);
}

}  // namespace rasm
