#pragma once

// LMDF tensor container.
//
// Layout (little-endian):
//   "LMDF" | u32 version (=1) | u32 tensor_count
//   per tensor: u32 name_len | name bytes (UTF-8) | u8 dtype (0=f32, 1=f64)
//               | u8 rank | rank x u32 extents | u64 payload offset
//   payloads: row-major, each starting at a 64-byte aligned file offset.

#include <filesystem>
#include <string>
#include <vector>

#include "lamamba/tensor.hpp"

namespace lamamba::lmdf {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint64_t kAlignment = 64;

struct Entry {
  std::string name;
  Tensor tensor;
};

/// Ordered collection of named tensors. Order is preserved on write/read so
/// files are byte-reproducible.
class Container {
 public:
  void add(std::string name, Tensor tensor);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

std::vector<std::uint8_t> encode(const Container& c);
Container decode(const std::vector<std::uint8_t>& bytes);

void write_file(const std::filesystem::path& path, const Container& c);
Container read_file(const std::filesystem::path& path);

/// One line per tensor: name, dtype, shape, payload offset.
std::string manifest(const Container& c);

}  // namespace lamamba::lmdf
