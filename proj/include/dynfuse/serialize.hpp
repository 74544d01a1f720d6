#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace dynfuse {

// Flat parameter blob, all integers 32-bit little-endian, floats 64-bit
// little-endian IEEE-754:
//
//   magic[4] | version u32 | layer_count u32
//   per layer:  tensor_count u32
//               per tensor: rank u32, dims i32 x rank
//   payload:    every tensor's values in declaration order
//
// An absent tensor is written as rank 1 with a single dimension of 0.
struct BlobTensor {
  std::vector<std::int32_t> shape;
  std::vector<double> values;
};

using BlobLayer = std::vector<BlobTensor>;

inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr std::array<char, 4> kKernelBankMagic{'D', 'F', 'K', 'B'};
inline constexpr std::array<char, 4> kFcBlobMagic{'D', 'F', 'F', 'C'};

std::string encode_blob(const std::array<char, 4>& magic, const std::vector<BlobLayer>& layers);
std::vector<BlobLayer> decode_blob(const std::array<char, 4>& magic, const std::string& bytes);

// Writes via a temporary file in the same directory followed by rename, so
// readers never observe a partially written file.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace dynfuse
