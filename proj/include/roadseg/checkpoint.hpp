#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "roadseg/tensor.hpp"

namespace roadseg {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout, all integers little-endian:
///   "RSKT" | version u32 | count u32 |
///   per tensor: name_len u32 | name bytes | rank u32 | dims u64[rank] | f64[prod(dims)]
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

std::vector<char> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<char>& bytes);

}  // namespace roadseg
