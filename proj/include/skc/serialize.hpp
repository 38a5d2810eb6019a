#pragma once

// Tensor snapshot files ("UATS"): little-endian container used by checkpoints
// and golden tests.
//
//   magic "UATS" | u32 format version | u8 dtype (0=f32, 1=f64) | u8 rank |
//   u64 extent per axis | payload, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "skc/error.hpp"
#include "skc/tensor.hpp"

namespace skc {

inline constexpr uint32_t kUatsVersion = 1;

namespace detail {

template <typename T>
constexpr uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "UATS supports f32 and f64 only");
  return std::is_same_v<T, float> ? 0 : 1;
}

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <typename T>
void write_uats(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write("UATS", 4);
  detail::put_u32(f, kUatsVersion);
  f.put(static_cast<char>(detail::dtype_code<T>()));
  f.put(static_cast<char>(t.rank()));
  for (int64_t i = 0; i < t.rank(); ++i)
    detail::put_u64(f, static_cast<uint64_t>(t.dim(i)));
  static_assert(std::endian::native == std::endian::little,
                "payload is written natively and must be little-endian");
  f.write(reinterpret_cast<const char*>(t.data().data()),
          static_cast<std::streamsize>(t.data().size() * sizeof(T)));
  if (!f) throw IoError("short write: " + path.string());
}

template <typename T>
Tensor<T> read_uats(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "UATS", 4) != 0)
    throw IoError("bad magic in tensor snapshot " + path.string());
  uint32_t version = detail::get_u32(f);
  if (version != kUatsVersion)
    throw IoError("unsupported snapshot version " + std::to_string(version) +
                  " in " + path.string());
  int dtype = f.get();
  if (dtype != detail::dtype_code<T>())
    throw IoError("dtype mismatch in " + path.string() + " (found code " +
                  std::to_string(dtype) + ")");
  int rank = f.get();
  if (rank < 0 || rank > 8) throw IoError("implausible rank in " + path.string());
  Shape shape(static_cast<size_t>(rank));
  for (auto& e : shape) e = static_cast<int64_t>(detail::get_u64(f));
  int64_t n = shape_numel(shape);
  std::vector<T> data(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (f.gcount() != static_cast<std::streamsize>(data.size() * sizeof(T)))
    throw IoError("truncated payload in " + path.string());
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

// Plain-text manifest: one "key=value" per line, written in key order.
inline void write_manifest(const std::filesystem::path& path,
                           const std::map<std::string, std::string>& entries) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  for (const auto& [k, v] : entries) f << k << "=" << v << "\n";
  if (!f) throw IoError("short write: " + path.string());
}

inline std::map<std::string, std::string> read_manifest(
    const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  std::map<std::string, std::string> entries;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("malformed manifest line in " + path.string() + ": " + line);
    entries[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return entries;
}

// FNV-1a, used to fingerprint the vocabulary in checkpoints.
inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace skc
