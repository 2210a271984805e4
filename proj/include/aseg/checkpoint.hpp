// Little-endian binary weight checkpoints.
//
// Layout: magic "ASEG", version u32, count u32, then per parameter:
// name length u16, UTF-8 name, dtype u8 (0=f32, 1=f64), rank u8,
// dims u32 each, raw values.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "aseg/tensor.hpp"

namespace aseg {

struct CheckpointEntry {
  std::uint8_t dtype = 1;  // 0=f32, 1=f64
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // held widened; narrowed back on f32 write
};

using Checkpoint = std::map<std::string, CheckpointEntry>;

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated while reading " + what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write("ASEG", 4);
  detail::write_raw<std::uint32_t>(os, 1);
  detail::write_raw<std::uint32_t>(os, std::uint32_t(ckpt.size()));
  for (const auto& [name, e] : ckpt) {
    if (name.size() > 0xffff) throw std::runtime_error("checkpoint: name too long");
    detail::write_raw<std::uint16_t>(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::write_raw<std::uint8_t>(os, e.dtype);
    detail::write_raw<std::uint8_t>(os, std::uint8_t(e.dims.size()));
    std::size_t count = 1;
    for (auto d : e.dims) {
      detail::write_raw<std::uint32_t>(os, d);
      count *= d;
    }
    if (count != e.values.size())
      throw std::runtime_error("checkpoint: dims/value mismatch for " + name);
    if (e.dtype == 1) {
      os.write(reinterpret_cast<const char*>(e.values.data()),
               std::streamsize(count * sizeof(double)));
    } else {
      std::vector<float> f(e.values.begin(), e.values.end());
      os.write(reinterpret_cast<const char*>(f.data()),
               std::streamsize(count * sizeof(float)));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ASEG", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  auto version = detail::read_raw<std::uint32_t>(is, "version");
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  auto count = detail::read_raw<std::uint32_t>(is, "count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto nlen = detail::read_raw<std::uint16_t>(is, "name length");
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    if (!is) throw std::runtime_error("checkpoint: truncated name");
    CheckpointEntry e;
    e.dtype = detail::read_raw<std::uint8_t>(is, "dtype");
    if (e.dtype > 1)
      throw std::runtime_error("checkpoint: unknown dtype " + std::to_string(e.dtype) +
                               " for " + name);
    auto rank = detail::read_raw<std::uint8_t>(is, "rank");
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      e.dims.push_back(detail::read_raw<std::uint32_t>(is, "dim"));
      n *= e.dims.back();
    }
    e.values.resize(n);
    if (e.dtype == 1) {
      is.read(reinterpret_cast<char*>(e.values.data()), std::streamsize(n * sizeof(double)));
    } else {
      std::vector<float> f(n);
      is.read(reinterpret_cast<char*>(f.data()), std::streamsize(n * sizeof(float)));
      for (std::size_t j = 0; j < n; ++j) e.values[j] = f[j];
    }
    if (!is) throw std::runtime_error("checkpoint: truncated values for " + name);
    ckpt.emplace(std::move(name), std::move(e));
  }
  return ckpt;
}

}  // namespace aseg
