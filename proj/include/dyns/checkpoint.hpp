#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dyns/tensor.hpp"

namespace dyns {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Binary parameter container:
//   "DYNS" | u32 version | records until end of stream
//   record = u32 name_len | name bytes (UTF-8) | u32 rank | u64 extents[rank] | f64 payload[numel]
// All integers and floats are little-endian; the payload is always f64.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over names, shapes and the f64 bit patterns of the values.
std::uint64_t checksum(const std::vector<NamedTensor>& params);

}  // namespace dyns
