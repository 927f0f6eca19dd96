#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arseg/binary_io.hpp"
#include "arseg/tensor.hpp"

// Tensor golden-file format ("TNSR"):
//   magic "TNSR", u8 rank, rank x u32 extents, f64 payload (row-major),
//   all little-endian.
// Label maps use the same container with rank 2 (H x W) and integral f64
// values; the ignore label is stored as-is (e.g. -1 or 255).
namespace arseg::io {

void write_tensor(ByteWriter& out, const Tensor& t);
Tensor read_tensor(ByteReader& in);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

Tensor labels_to_tensor(const LabelMap& labels);
LabelMap tensor_to_labels(const Tensor& t);
void save_labels(const std::string& path, const LabelMap& labels);
LabelMap load_labels(const std::string& path);

}  // namespace arseg::io
