#include "iau/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

namespace iau::io {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("truncated ") + what);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_tensor(std::ostream& out, const Shape& shape, std::span<const float> values) {
  if (shape.size() > 255) throw FormatError("tensor rank exceeds 255");
  out.write(kTensorMagic, 4);
  const char header[3] = {static_cast<char>(kTensorVersion), static_cast<char>(kDtypeFloat32),
                          static_cast<char>(shape.size())};
  out.write(header, 3);
  for (auto d : shape) write_u32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
}

void write_tensor(std::ostream& out, const TensorF& t) { write_tensor(out, t.shape(), t.data()); }

void write_tensor(std::ostream& out, const TensorD& t) {
  std::vector<float> narrowed(t.data().begin(), t.data().end());
  write_tensor(out, t.shape(), narrowed);
}

TensorF read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("truncated tensor header");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  unsigned char header[3];
  if (!in.read(reinterpret_cast<char*>(header), 3)) throw FormatError("truncated tensor header");
  if (header[0] != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(header[0]));
  if (header[1] != kDtypeFloat32) throw FormatError("unsupported tensor dtype " + std::to_string(header[1]));
  Shape shape(header[2]);
  for (auto& d : shape) {
    d = read_u32(in, "tensor dims");
    if (d == 0) throw FormatError("zero tensor dimension");
  }
  std::vector<float> values(numel(shape));
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(float))))
    throw FormatError("truncated tensor payload");
  return TensorF(std::move(shape), std::move(values));
}

namespace {
template <typename T>
void save_impl(const std::filesystem::path& path, const T& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
  if (!out) throw IoError("write failed for " + path.string());
}
}  // namespace

void save_tensor(const std::filesystem::path& path, const TensorF& t) { save_impl(path, t); }
void save_tensor(const std::filesystem::path& path, const TensorD& t) { save_impl(path, t); }

TensorF load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace iau::io
