#include "sama/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sama {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'N', '1'};

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

// Copies `count` scalars of width `width` into little-endian order.
void copy_le(const void* src, std::size_t count, std::size_t width, std::uint8_t* dst) {
  std::memcpy(dst, src, count * width);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) std::reverse(dst + i * width, dst + (i + 1) * width);
  }
}

template <typename Src>
StnArray pack(DType dtype, const Shape& shape, std::span<const Src> values) {
  StnArray a;
  a.dtype = dtype;
  a.shape = shape;
  a.payload.resize(values.size() * sizeof(Src));
  copy_le(values.data(), values.size(), sizeof(Src), a.payload.data());
  return a;
}

template <typename Src, typename T>
void unpack(const StnArray& a, std::vector<T>& out) {
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    Src v;
    std::uint8_t buf[sizeof(Src)];
    std::memcpy(buf, a.payload.data() + i * sizeof(Src), sizeof(Src));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(Src));
    std::memcpy(&v, buf, sizeof(Src));
    out[i] = static_cast<T>(v);
  }
}

}  // namespace

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kU16: return 2;
  }
  throw StnError("unknown dtype tag " + std::to_string(static_cast<int>(dtype)));
}

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
    case DType::kU16: return "u16";
  }
  return "?";
}

template <typename T>
std::vector<T> StnArray::values() const {
  std::vector<T> out(numel());
  switch (dtype) {
    case DType::kF32: unpack<float>(*this, out); break;
    case DType::kF64: unpack<double>(*this, out); break;
    case DType::kU8: unpack<std::uint8_t>(*this, out); break;
    case DType::kU16: unpack<std::uint16_t>(*this, out); break;
  }
  return out;
}

template std::vector<float> StnArray::values<float>() const;
template std::vector<double> StnArray::values<double>() const;
template std::vector<std::uint8_t> StnArray::values<std::uint8_t>() const;
template std::vector<std::uint16_t> StnArray::values<std::uint16_t>() const;

std::vector<std::uint8_t> encode_stn(const StnArray& array) {
  if (array.shape.size() > 255) throw StnError("rank exceeds 255");
  if (array.payload.size() != array.numel() * dtype_size(array.dtype)) {
    throw StnError("payload size does not match shape " + shape_str(array.shape));
  }
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<std::uint8_t>(array.dtype));
  out.push_back(static_cast<std::uint8_t>(array.shape.size()));
  for (auto e : array.shape) put_le(out, e, 8);
  out.insert(out.end(), array.payload.begin(), array.payload.end());
  return out;
}

StnArray decode_stn(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw StnError("missing STN1 magic");
  }
  const std::uint8_t tag = bytes[4];
  if (tag > 3) throw StnError("unknown dtype tag " + std::to_string(tag));
  StnArray a;
  a.dtype = static_cast<DType>(tag);
  const std::size_t rank = bytes[5];
  std::size_t at = 6;
  if (bytes.size() < at + 8 * rank) throw StnError("truncated STN1 header");
  for (std::size_t i = 0; i < rank; ++i, at += 8) a.shape.push_back(get_le(bytes.data() + at, 8));
  const std::size_t need = a.numel() * dtype_size(a.dtype);
  if (bytes.size() - at != need) {
    throw StnError("STN1 payload is " + std::to_string(bytes.size() - at) + " bytes, shape " +
                   shape_str(a.shape) + " needs " + std::to_string(need));
  }
  a.payload.assign(bytes.begin() + static_cast<long>(at), bytes.end());
  return a;
}

void write_stn(const std::filesystem::path& path, const StnArray& array) {
  const auto bytes = encode_stn(array);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StnError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw StnError("write failed for " + path.string());
}

StnArray read_stn(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StnError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_stn(bytes);
  } catch (const StnError& e) {
    throw StnError(path.string() + ": " + e.what());
  }
}

StnArray to_stn(const Tensor<float>& t) { return pack<float>(DType::kF32, t.shape(), t.data()); }

StnArray to_stn(const Tensor<double>& t) {
  return pack<double>(DType::kF64, t.shape(), t.data());
}

StnArray to_stn_u8(const Shape& shape, std::span<const std::uint8_t> values) {
  if (numel(shape) != values.size()) throw StnError("u8 values do not match " + shape_str(shape));
  return pack<std::uint8_t>(DType::kU8, shape, values);
}

StnArray to_stn_u16(const Shape& shape, std::span<const std::uint16_t> values) {
  if (numel(shape) != values.size()) throw StnError("u16 values do not match " + shape_str(shape));
  return pack<std::uint16_t>(DType::kU16, shape, values);
}

}  // namespace sama
