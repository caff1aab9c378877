#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>

#include "iau/tensor.hpp"

// Raw tensor file: "IAUT", version 0x01, dtype 0x00 (float32 LE), rank byte,
// rank x u32 LE dims, row-major payload.
namespace iau::io {

inline constexpr char kTensorMagic[4] = {'I', 'A', 'U', 'T'};
inline constexpr std::uint8_t kTensorVersion = 0x01;
inline constexpr std::uint8_t kDtypeFloat32 = 0x00;

void write_tensor(std::ostream& out, const Shape& shape, std::span<const float> values);
void write_tensor(std::ostream& out, const TensorF& t);
// Double tensors are narrowed to float32 on write.
void write_tensor(std::ostream& out, const TensorD& t);
TensorF read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const TensorF& t);
void save_tensor(const std::filesystem::path& path, const TensorD& t);
TensorF load_tensor(const std::filesystem::path& path);

void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in, const char* what);

}  // namespace iau::io
