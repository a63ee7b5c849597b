#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <string>
#include <vector>

#include "stpl/diffcore/tensor.hpp"
#include "stpl/errors.hpp"

namespace stpl::io {

static_assert(std::endian::native == std::endian::little, "STVD payloads are little-endian");

namespace fs = std::filesystem;

/// Records every path opened for reading while enabled. Used to prove that
/// the adaptation path never touches source data or target labels.
class ReadAudit {
 public:
  static ReadAudit& instance() {
    static ReadAudit audit;
    return audit;
  }

  void start() {
    std::lock_guard lock(mu_);
    paths_.clear();
    enabled_ = true;
  }

  std::vector<fs::path> stop() {
    std::lock_guard lock(mu_);
    enabled_ = false;
    return std::move(paths_);
  }

  void note(const fs::path& p) {
    std::lock_guard lock(mu_);
    if (enabled_) paths_.push_back(fs::absolute(p).lexically_normal());
  }

 private:
  std::mutex mu_;
  bool enabled_ = false;
  std::vector<fs::path> paths_;
};

/// All library reads go through here.
inline std::ifstream open_read(const fs::path& path) {
  ReadAudit::instance().note(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return in;
}

inline std::string read_text(const fs::path& path) {
  auto in = open_read(path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::ofstream open_write(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  auto out = open_write(path);
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// STVD container: "STVD", u8 version, u8 dtype, u8 ndim, u32 LE extents, payload.

enum class DType : std::uint8_t { kF32 = 0, kU8 = 1, kF64 = 2 };

inline constexpr std::uint8_t kStvdVersion = 1;

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32:
      return 4;
    case DType::kU8:
      return 1;
    case DType::kF64:
      return 8;
  }
  return 0;
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::kF32;
  else if constexpr (std::is_same_v<T, double>) return DType::kF64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>);
    return DType::kU8;
  }
}

struct RawArray {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<char> payload;
};

inline void write_raw(const fs::path& path, DType dtype, const Shape& shape, const void* data) {
  if (shape.size() > 255) throw FormatError(path.string() + ": too many dimensions");
  std::string header = "STVD";
  header.push_back(static_cast<char>(kStvdVersion));
  header.push_back(static_cast<char>(dtype));
  header.push_back(static_cast<char>(shape.size()));
  for (auto e : shape) {
    if (e > 0xffffffffULL) throw FormatError(path.string() + ": extent exceeds u32");
    const auto v = static_cast<std::uint32_t>(e);
    for (int b = 0; b < 4; ++b) header.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
  }
  auto out = open_write(path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(data),
            static_cast<std::streamsize>(numel(shape) * dtype_size(dtype)));
  if (!out) throw IoError("write failed for " + path.string());
}

template <class T>
void write_tensor(const fs::path& path, const Tensor<T>& t) {
  write_raw(path, dtype_of<T>(), t.shape(), t.data().data());
}

inline void write_u8(const fs::path& path, const Shape& shape, const std::vector<std::uint8_t>& v) {
  if (numel(shape) != v.size()) throw DimensionError("write_u8: payload/shape mismatch");
  write_raw(path, DType::kU8, shape, v.data());
}

inline RawArray read_raw(const fs::path& path) {
  auto in = open_read(path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < 7 || bytes.compare(0, 4, "STVD") != 0) {
    throw FormatError(name + ": bad magic");
  }
  if (static_cast<std::uint8_t>(bytes[4]) != kStvdVersion) {
    throw FormatError(name + ": unsupported version " +
                      std::to_string(static_cast<int>(static_cast<std::uint8_t>(bytes[4]))));
  }
  const auto code = static_cast<std::uint8_t>(bytes[5]);
  if (code > 2) throw FormatError(name + ": unknown dtype code " + std::to_string(code));
  RawArray raw;
  raw.dtype = static_cast<DType>(code);
  const std::size_t ndim = static_cast<std::uint8_t>(bytes[6]);
  std::size_t pos = 7;
  if (bytes.size() < pos + 4 * ndim) throw FormatError(name + ": truncated shape header");
  for (std::size_t d = 0; d < ndim; ++d) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos + b])) << (8 * b);
    }
    if (v == 0) throw FormatError(name + ": zero extent in shape header");
    raw.shape.push_back(v);
    pos += 4;
  }
  const std::size_t expect = numel(raw.shape) * dtype_size(raw.dtype);
  if (bytes.size() - pos != expect) {
    throw FormatError(name + ": payload holds " + std::to_string(bytes.size() - pos) +
                      " bytes, expected " + std::to_string(expect));
  }
  raw.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return raw;
}

/// Reads a floating tensor, widening or narrowing from the stored precision.
template <class T>
Tensor<T> read_tensor(const fs::path& path) {
  const RawArray raw = read_raw(path);
  const std::size_t n = numel(raw.shape);
  std::vector<T> data(n);
  if (raw.dtype == DType::kF32) {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), raw.payload.data(), n * 4);
    std::copy(tmp.begin(), tmp.end(), data.begin());
  } else if (raw.dtype == DType::kF64) {
    std::vector<double> tmp(n);
    std::memcpy(tmp.data(), raw.payload.data(), n * 8);
    std::copy(tmp.begin(), tmp.end(), data.begin());
  } else {
    throw FormatError(path.string() + ": expected a floating-point payload");
  }
  return Tensor<T>(raw.shape, std::move(data));
}

inline std::vector<std::uint8_t> read_u8(const fs::path& path, Shape& shape) {
  const RawArray raw = read_raw(path);
  if (raw.dtype != DType::kU8) throw FormatError(path.string() + ": expected a u8 payload");
  shape = raw.shape;
  return std::vector<std::uint8_t>(raw.payload.begin(), raw.payload.end());
}

/// FNV-1a over a byte range; used for provenance hashes and dataset checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace stpl::io
