#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sama/tensor.hpp"

// STN1 binary array files: magic "STN1", u8 dtype, u8 rank, rank x u64 LE
// extents, then the row-major little-endian payload.

namespace sama {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2, kU16 = 3 };

std::size_t dtype_size(DType dtype);
const char* dtype_name(DType dtype);

struct StnArray {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian bytes

  std::size_t numel() const { return sama::numel(shape); }
  /// Converts any stored dtype to T.
  template <typename T>
  std::vector<T> values() const;
};

class StnError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_stn(const StnArray& array);
StnArray decode_stn(std::span<const std::uint8_t> bytes);

void write_stn(const std::filesystem::path& path, const StnArray& array);
StnArray read_stn(const std::filesystem::path& path);

StnArray to_stn(const Tensor<float>& t);
StnArray to_stn(const Tensor<double>& t);
StnArray to_stn_u8(const Shape& shape, std::span<const std::uint8_t> values);
StnArray to_stn_u16(const Shape& shape, std::span<const std::uint16_t> values);

template <typename T>
Tensor<T> tensor_from_stn(const StnArray& array) {
  return Tensor<T>::from(array.shape, array.values<T>());
}

}  // namespace sama
