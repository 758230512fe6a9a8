#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "plvl/numerics/gradcheck.hpp"
#include "plvl/numerics/tensor.hpp"

// Binary tensor record:
//   "PLVT" | version u32 | rank u32 | dims u32 x rank | dtype u8 | payload
// All integers and scalars little-endian. dtype 1 = f32, 2 = f64.
//
// Checkpoint container wrapping named records:
//   "PLVC" | version u32 | count u32 | { name_len u32 | name | PLVT record } x count

namespace plvl::io {

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("unexpected end of tensor stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(U));
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace detail

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("PLVT", 4);
  detail::put_le<std::uint32_t>(os, kTensorVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  for (T v : t.data()) detail::put_le<T>(os, v);
}

// Reads a record of either dtype, converting to T.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  detail::expect_magic(is, "PLVT");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto rank = detail::get_le<std::uint32_t>(is);
  if (rank == 0 || rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_le<std::uint32_t>(is);
  const auto code = detail::get_le<std::uint8_t>(is);
  std::vector<T> data(shape_numel(shape));
  if (code == static_cast<std::uint8_t>(DType::f32)) {
    for (auto& v : data) v = static_cast<T>(detail::get_le<float>(is));
  } else if (code == static_cast<std::uint8_t>(DType::f64)) {
    for (auto& v : data) v = static_cast<T>(detail::get_le<double>(is));
  } else {
    throw FormatError("unknown dtype code " + std::to_string(code));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void write_checkpoint(const std::string& path, const std::vector<NamedTensor<T>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write("PLVC", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_tensor(os, e.tensor);
  }
  if (!os) throw FormatError("write failed for " + path);
}

template <typename T>
std::vector<NamedTensor<T>> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  detail::expect_magic(is, "PLVC");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is);
  std::vector<NamedTensor<T>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is);
    if (len > 4096) throw FormatError("implausible entry name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint " + path);
    out.push_back({std::move(name), read_tensor<T>(is)});
  }
  return out;
}

}  // namespace plvl::io
