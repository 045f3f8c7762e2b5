#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "imim/tensor.hpp"

namespace imim {

// Little-endian tensor blob: "IMTN", u32 version, u32 rank, u64 dims[rank],
// float64 payload.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

// Exact byte size of write_tensor's output for this shape.
std::size_t tensor_blob_size(const Shape& shape);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

namespace io {

void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);

}  // namespace io

}  // namespace imim
