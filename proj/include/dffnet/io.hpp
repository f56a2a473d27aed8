#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "dffnet/tensor.hpp"

/// DTNS tensor files:
///
///   "DTNS" | version u32 = 1 | dtype u8 | rank u8 | rank x u64 dims | payload
///
/// All integers and the row-major payload are little-endian.
namespace dffnet::io {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

inline constexpr char kMagic[4] = {'D', 'T', 'N', 'S'};
inline constexpr std::uint32_t kVersion = 1;

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(t)));
}

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
    case DType::u8: return "u8";
  }
  return "?";
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
  else static_assert(sizeof(T) == 0, "unsupported DTNS element type");
}

/// One decoded record: dtype, shape and little-endian payload bytes.
struct Record {
  DType dtype = DType::f64;
  Shape shape;
  std::vector<unsigned char> payload;

  std::size_t numel() const { return shape_numel(shape); }

  /// Element i converted to U. Reads through the little-endian encoding.
  template <class U>
  std::vector<U> as() const {
    const std::size_t n = numel(), w = dtype_size(dtype);
    std::vector<U> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* p = payload.data() + i * w;
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < w; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
      switch (dtype) {
        case DType::f32: out[i] = static_cast<U>(std::bit_cast<float>(static_cast<std::uint32_t>(bits))); break;
        case DType::f64: out[i] = static_cast<U>(std::bit_cast<double>(bits)); break;
        case DType::i32: out[i] = static_cast<U>(static_cast<std::int32_t>(static_cast<std::uint32_t>(bits))); break;
        case DType::u8: out[i] = static_cast<U>(static_cast<std::uint8_t>(bits)); break;
      }
    }
    return out;
  }
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t b = 0; b < bytes; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

template <class U>
std::uint64_t bits_of(U v) {
  if constexpr (sizeof(U) == 8) return std::bit_cast<std::uint64_t>(v);
  else if constexpr (sizeof(U) == 4) return std::bit_cast<std::uint32_t>(v);
  else return std::bit_cast<std::uint8_t>(v);
}

inline void read_exact(std::istream& in, void* dst, std::size_t n, const std::string& what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("truncated DTNS data while reading " + what);
}

inline std::uint64_t get_le(const unsigned char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

}  // namespace detail

/// Header bytes for a tensor of `dtype` and `shape`.
inline std::string encode_header(DType dtype, const Shape& shape) {
  if (shape.size() > 255) throw FormatError("DTNS rank " + std::to_string(shape.size()) + " exceeds 255");
  std::string h(kMagic, 4);
  detail::put_le(h, kVersion, 4);
  h.push_back(static_cast<char>(dtype));
  h.push_back(static_cast<char>(shape.size()));
  for (auto d : shape) detail::put_le(h, d, 8);
  return h;
}

/// Full encoding (header + payload) of `values` with the given shape.
template <class U>
std::string encode(const Shape& shape, std::span<const U> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("DTNS encode: shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
  }
  std::string out = encode_header(dtype_of<U>(), shape);
  out.reserve(out.size() + values.size() * sizeof(U));
  for (U v : values) detail::put_le(out, detail::bits_of(v), sizeof(U));
  return out;
}

template <class U>
std::string encode(const Tensor<U>& t) {
  return encode<U>(t.shape(), t.data());
}

/// Reads one record from a stream positioned at its magic.
inline Record read_record(std::istream& in) {
  unsigned char head[10];
  detail::read_exact(in, head, 4, "magic");
  if (std::memcmp(head, kMagic, 4) != 0) throw FormatError("bad DTNS magic");
  detail::read_exact(in, head + 4, 6, "header");
  const auto version = static_cast<std::uint32_t>(detail::get_le(head + 4, 4));
  if (version != kVersion) throw FormatError("unsupported DTNS version " + std::to_string(version));
  const auto code = head[8];
  if (code > 3) throw FormatError("unknown DTNS dtype code " + std::to_string(code));
  Record r;
  r.dtype = static_cast<DType>(code);
  const std::size_t rank = head[9];
  std::vector<unsigned char> dims(rank * 8);
  detail::read_exact(in, dims.data(), dims.size(), "dims");
  r.shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    r.shape[i] = detail::get_le(dims.data() + 8 * i, 8);
    if (r.shape[i] == 0) throw FormatError("DTNS dimension " + std::to_string(i) + " is zero");
  }
  r.payload.resize(r.numel() * dtype_size(r.dtype));
  detail::read_exact(in, r.payload.data(), r.payload.size(), "payload");
  return r;
}

inline Record decode(const std::string& bytes) {
  std::istringstream in(bytes);
  return read_record(in);
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline Record read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    Record r = read_record(in);
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after DTNS payload");
    return r;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <class U>
void write_tensor(const std::filesystem::path& path, const Tensor<U>& t) {
  write_bytes(path, encode(t));
}

/// Reads a floating-point tensor; f32 / f64 / integer payloads are converted to T.
template <class T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  Record r = read_file(path);
  return Tensor<T>(r.shape, r.as<T>());
}

}  // namespace dffnet::io
