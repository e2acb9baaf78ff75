#pragma once

// PMNT1 checkpoint container.
//
// Layout (all integers little-endian):
//   "PMNT1"                                 5-byte magic
//   u32 tensor_count
//   tensor_count x { u32 name_len, name, u32 rank, u64 dims[rank], u64 offset }
//   u32 meta_count
//   meta_count x { u32 key_len, key, u32 value_len, value }
//   u64 data_bytes
//   data: f64 values, little-endian; each tensor starts at its manifest offset
//         (relative to the start of the data block), tensors packed in order.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pointmoment/tensor.hpp"

namespace pointmoment {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::vector<std::pair<std::string, std::string>> meta;

  const Tensor& tensor(const std::string& name) const;
  const std::string& meta_value(const std::string& key) const;
};

std::string encode_pmnt(const Checkpoint& ckpt);
// Throws FormatError on any inconsistency; never returns partial content.
Checkpoint decode_pmnt(const std::string& bytes);

// Writes via a temporary file and rename.
void write_pmnt(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_pmnt(const std::filesystem::path& path);

}  // namespace pointmoment
