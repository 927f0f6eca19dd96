#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arseg/tensor.hpp"

// Toy GOP codec: I frames store raw pixels, P frames store one integer motion
// vector per block plus a quantized residual. Every P frame predicts from the
// I frame that opens its GOP.
namespace arseg::codec {

struct MotionVector {
  int dx = 0;
  int dy = 0;
  bool operator==(const MotionVector&) const = default;
};

/// Block-level motion. Adding a block's vector to a current-frame coordinate
/// gives the sampling location in the reference frame.
struct MotionField {
  std::size_t block_size = 0;
  std::size_t blocks_y = 0;
  std::size_t blocks_x = 0;
  std::vector<MotionVector> vectors;  // row-major over blocks

  const MotionVector& at(std::size_t by, std::size_t bx) const {
    return vectors[by * blocks_x + bx];
  }
  MotionVector& at(std::size_t by, std::size_t bx) { return vectors[by * blocks_x + bx]; }
  bool operator==(const MotionField&) const = default;
};

/// Full-search SAD block matching of `current` against `reference`.
/// Frames whose size is not a multiple of `block_size` are treated as
/// edge-replicated up to the next multiple. Candidates are visited as (0,0),
/// then by ascending |dx|+|dy|, then dy, then dx; the first strict minimum wins.
MotionField estimate_motion(const Tensor& reference, const Tensor& current,
                            std::size_t block_size, int search_range);

/// Sum of absolute differences of one block at a candidate displacement.
double block_sad(const Tensor& reference, const Tensor& current, std::size_t block_size,
                 std::size_t by, std::size_t bx, MotionVector mv);

/// Per-pixel expansion to a 2×H×W tensor, channel 0 = x, channel 1 = y.
Tensor expand_mv(const MotionField& field, std::size_t height, std::size_t width);

/// Builds reference-sampled prediction: out(c,y,x) = ref(c, clamp(y+dy), clamp(x+dx)).
Tensor motion_compensate(const Tensor& reference, const MotionField& field);

struct CodecParams {
  std::size_t gop_length = 12;
  std::size_t block_size = 8;
  int search_range = 8;
  double quant_step = 0.0;  // 0 = lossless residuals
};

enum class FrameType : std::uint8_t { I = 0, P = 1 };

struct EncodedFrame {
  FrameType type = FrameType::I;
  Tensor pixels;       // I frames
  MotionField motion;  // P frames
  Tensor residual;     // P frames, already quantized
};

struct EncodedClip {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  CodecParams params;
  std::vector<EncodedFrame> frames;

  std::size_t gop_count() const {
    return (frames.size() + params.gop_length - 1) / params.gop_length;
  }
};

EncodedClip encode_clip(std::span<const Tensor> frames, const CodecParams& params);

struct DecodedClip {
  std::vector<Tensor> frames;
  std::vector<std::optional<MotionField>> motion;  // empty for I frames
};

DecodedClip decode_clip(const EncodedClip& clip);

/// Bit-exact "ARSG" v1 container.
std::vector<std::uint8_t> serialize_clip(const EncodedClip& clip);
EncodedClip parse_clip(std::span<const std::uint8_t> bytes);

void save_clip(const std::string& path, const EncodedClip& clip);
EncodedClip load_clip(const std::string& path);

}  // namespace arseg::codec
