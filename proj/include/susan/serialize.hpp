#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "susan/tensor.hpp"

namespace susan {

/// SUSN container: "SUSN", u32 version, u32 tensor count, then per tensor u32 name length,
/// UTF-8 name and 4 x u32 shape; the tensor payloads follow as little-endian float32 in the
/// same order. All integers are little-endian.
inline constexpr std::uint32_t kSusnVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor4<float> tensor;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string encode_susn(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_susn(const std::string& bytes);

void write_susn(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_susn(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames, so readers never observe a partial file.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace susan
