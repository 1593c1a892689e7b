#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "pcisr/tensor.hpp"

namespace pcisr {

// Tensor container ("PCIT"):
//   magic "PCIT" | u32 version = 1 | u8 dtype (0 = f64) | u32 ndim |
//   u64 extents[ndim] | f64 payload, row-major
// All integers and floats are little-endian.
void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

// Back-to-back PCIT records in one file.
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_tensors(const std::filesystem::path& path);

// Binary greyscale PGM (P5). Values in [0, 1] are mapped linearly onto
// [0, maxval]; 16-bit samples are big-endian.
void write_pgm(const std::filesystem::path& path, const Tensor& image, int bit_depth = 16);
void write_pgm(std::ostream& out, const Tensor& image, int bit_depth = 16);
Tensor read_pgm(const std::filesystem::path& path);
Tensor read_pgm(std::istream& in);

namespace binary {

void put_u8(std::ostream& out, std::uint8_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint8_t get_u8(std::istream& in);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
void expect_magic(std::istream& in, const char (&magic)[5]);

}  // namespace binary

}  // namespace pcisr
