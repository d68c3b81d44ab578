#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tailquant/tensor.hpp"

namespace tailquant {

/// On-disk tensor container: a JSON manifest next to one packed binary file
/// of little-endian 32-bit reals, row-major. Every entry carries a 64-bit
/// FNV-1a checksum of its payload bytes. Compute stays in 64-bit; the format
/// narrows to 32-bit on write and promotes on read.
struct BundleEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t byte_length = 0;
  std::uint64_t checksum = 0;
};

struct TensorBundle {
  std::vector<BundleEntry> entries;  // manifest order
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

std::uint64_t fnv1a64(const unsigned char* data, std::size_t len);

/// Serialize to <manifest_path> (JSON) plus the sibling payload file named in
/// it. Both files are written atomically (temp + rename).
void write_bundle(const std::string& manifest_path,
                  const std::vector<std::pair<std::string, Tensor>>& entries,
                  const nlohmann::json& meta = nlohmann::json::object());

/// Load and validate (checksums, byte lengths, finiteness). Throws
/// std::runtime_error naming the offending path or entry.
TensorBundle read_bundle(const std::string& manifest_path);

void atomic_write_file(const std::string& path, const std::string& bytes);

/// Round a tensor through 32-bit storage precision.
Tensor to_storage_precision(const Tensor& t);

}  // namespace tailquant
