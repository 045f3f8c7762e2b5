#include "imim/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace imim {

namespace io {

namespace {

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> bytes;
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw FormatError("unexpected end of tensor stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t get_u32(std::istream& in) { return get_le<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get_le<std::uint64_t>(in); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

}  // namespace io

namespace {
constexpr char kMagic[4] = {'I', 'M', 'T', 'N'};
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic, 4);
  io::put_u32(out, kTensorFormatVersion);
  io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) io::put_u64(out, d);
  for (double v : t.data()) io::put_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not an IMTN tensor blob");
  const auto version = io::get_u32(in);
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported IMTN version " + std::to_string(version));
  }
  const auto rank = io::get_u32(in);
  if (rank == 0 || rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = io::get_u64(in);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = io::get_f64(in);
  return Tensor::from(std::move(shape), std::move(data));
}

std::size_t tensor_blob_size(const Shape& shape) {
  return 4 + 4 + 4 + 8 * shape.size() + 8 * shape_numel(shape);
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_tensor(in);
}

}  // namespace imim
