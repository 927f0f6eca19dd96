#include "arseg/tensor_io.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

namespace arseg::io {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot create " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to " + path);
}

void write_tensor(ByteWriter& out, const Tensor& t) {
  out.magic("TNSR");
  out.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) out.u32(static_cast<std::uint32_t>(e));
  out.f64s(t.data());
}

Tensor read_tensor(ByteReader& in) {
  in.expect_magic("TNSR", "tensor header");
  const std::size_t rank_at = in.offset();
  const auto rank = in.u8("tensor rank");
  if (rank == 0 || rank > 4) {
    throw FormatError("tensor rank " + std::to_string(rank) + " outside 1..4", rank_at);
  }
  Shape shape(rank);
  for (auto& e : shape) {
    const std::size_t at = in.offset();
    e = in.u32("tensor extent");
    if (e == 0) throw FormatError("zero tensor extent", at);
  }
  std::vector<double> data(shape_numel(shape));
  in.f64s(data, "tensor payload");
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  ByteWriter w;
  write_tensor(w, t);
  return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  return read_tensor(r);
}

void save_tensor(const std::string& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor load_tensor(const std::string& path) { return decode_tensor(read_file(path)); }

Tensor labels_to_tensor(const LabelMap& labels) {
  std::vector<double> data(labels.labels.begin(), labels.labels.end());
  return Tensor({labels.height, labels.width}, std::move(data));
}

LabelMap tensor_to_labels(const Tensor& t) {
  if (t.rank() != 2) throw FormatError("label map must be rank 2, got " + shape_str(t.shape()));
  LabelMap m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    if (v != std::floor(v)) throw FormatError("label map holds a non-integral value");
    m.labels[i] = static_cast<std::int32_t>(v);
  }
  return m;
}

void save_labels(const std::string& path, const LabelMap& labels) {
  save_tensor(path, labels_to_tensor(labels));
}

LabelMap load_labels(const std::string& path) { return tensor_to_labels(load_tensor(path)); }

}  // namespace arseg::io
