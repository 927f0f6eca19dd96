#include "arseg/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include "arseg/binary_io.hpp"
#include "arseg/errors.hpp"

namespace arseg::codec {

namespace {

std::size_t clamp_coord(long v, std::size_t extent) {
  if (v < 0) return 0;
  if (static_cast<std::size_t>(v) >= extent) return extent - 1;
  return static_cast<std::size_t>(v);
}

std::vector<MotionVector> candidate_order(int range) {
  std::vector<MotionVector> c;
  for (int dy = -range; dy <= range; ++dy) {
    for (int dx = -range; dx <= range; ++dx) c.push_back({dx, dy});
  }
  std::stable_sort(c.begin(), c.end(), [](const MotionVector& a, const MotionVector& b) {
    const int la = std::abs(a.dx) + std::abs(a.dy);
    const int lb = std::abs(b.dx) + std::abs(b.dy);
    if (la != lb) return la < lb;
    if (a.dy != b.dy) return a.dy < b.dy;
    return a.dx < b.dx;
  });
  return c;
}

void check_frame(const Tensor& t, const char* what) { require_rank(t, 3, what); }

}  // namespace

double block_sad(const Tensor& reference, const Tensor& current, std::size_t block_size,
                 std::size_t by, std::size_t bx, MotionVector mv) {
  const std::size_t c = current.dim(0), h = current.dim(1), w = current.dim(2);
  double sad = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t j = 0; j < block_size; ++j) {
      const long y = static_cast<long>(by * block_size + j);
      const std::size_t cy = clamp_coord(y, h);
      const std::size_t ry = clamp_coord(y + mv.dy, h);
      for (std::size_t i = 0; i < block_size; ++i) {
        const long x = static_cast<long>(bx * block_size + i);
        const std::size_t cx = clamp_coord(x, w);
        const std::size_t rx = clamp_coord(x + mv.dx, w);
        sad += std::abs(current.at(ch, cy, cx) - reference.at(ch, ry, rx));
      }
    }
  }
  return sad;
}

MotionField estimate_motion(const Tensor& reference, const Tensor& current,
                            std::size_t block_size, int search_range) {
  check_frame(reference, "estimate_motion reference");
  check_frame(current, "estimate_motion current");
  require_same_shape(reference, current, "estimate_motion");
  const std::size_t h = current.dim(1), w = current.dim(2);
  if (block_size == 0 || block_size > std::min(h, w)) {
    throw std::invalid_argument("estimate_motion: block size " + std::to_string(block_size) +
                                " exceeds frame extent " + std::to_string(std::min(h, w)));
  }
  if (search_range < 0) throw std::invalid_argument("estimate_motion: negative search range");

  MotionField field;
  field.block_size = block_size;
  field.blocks_y = (h + block_size - 1) / block_size;
  field.blocks_x = (w + block_size - 1) / block_size;
  field.vectors.resize(field.blocks_y * field.blocks_x);
  const auto candidates = candidate_order(search_range);
  for (std::size_t by = 0; by < field.blocks_y; ++by) {
    for (std::size_t bx = 0; bx < field.blocks_x; ++bx) {
      MotionVector best{};
      double best_sad = std::numeric_limits<double>::infinity();
      for (const auto& mv : candidates) {
        const double sad = block_sad(reference, current, block_size, by, bx, mv);
        if (sad < best_sad) {
          best_sad = sad;
          best = mv;
        }
      }
      field.at(by, bx) = best;
    }
  }
  return field;
}

Tensor expand_mv(const MotionField& field, std::size_t height, std::size_t width) {
  if (field.blocks_y * field.block_size < height || field.blocks_x * field.block_size < width) {
    throw ShapeError("expand_mv: block grid does not cover " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  Tensor out({2, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const auto& mv = field.at(y / field.block_size, x / field.block_size);
      out.at(0, y, x) = mv.dx;
      out.at(1, y, x) = mv.dy;
    }
  }
  return out;
}

Tensor motion_compensate(const Tensor& reference, const MotionField& field) {
  check_frame(reference, "motion_compensate reference");
  const std::size_t c = reference.dim(0), h = reference.dim(1), w = reference.dim(2);
  Tensor out(reference.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto& mv = field.at(y / field.block_size, x / field.block_size);
      const std::size_t sy = clamp_coord(static_cast<long>(y) + mv.dy, h);
      const std::size_t sx = clamp_coord(static_cast<long>(x) + mv.dx, w);
      for (std::size_t ch = 0; ch < c; ++ch) out.at(ch, y, x) = reference.at(ch, sy, sx);
    }
  }
  return out;
}

namespace {

// Lossless mode: pick the residual closest to cur - pred for which
// pred + residual reproduces cur bit-for-bit, when such a value is reachable.
double exact_residual(double cur, double pred) {
  double r = cur - pred;
  if (pred + r == cur) return r;
  double up = r, down = r;
  for (int step = 0; step < 4; ++step) {
    up = std::nextafter(up, std::numeric_limits<double>::infinity());
    if (pred + up == cur) return up;
    down = std::nextafter(down, -std::numeric_limits<double>::infinity());
    if (pred + down == cur) return down;
  }
  return r;
}

void validate_params(const CodecParams& p) {
  if (p.gop_length == 0 || p.gop_length > 0xFFFF) {
    throw std::invalid_argument("codec: gop length must be in [1, 65535]");
  }
  if (p.block_size == 0 || p.block_size > 0xFF) {
    throw std::invalid_argument("codec: block size must be in [1, 255]");
  }
  if (p.search_range < 0 || p.search_range > 127) {
    throw std::invalid_argument("codec: search range must be in [0, 127]");
  }
  if (!(p.quant_step >= 0.0) || !std::isfinite(p.quant_step)) {
    throw std::invalid_argument("codec: quant step must be finite and >= 0");
  }
}

}  // namespace

EncodedClip encode_clip(std::span<const Tensor> frames, const CodecParams& params) {
  validate_params(params);
  if (frames.empty()) throw std::invalid_argument("encode_clip: no frames");
  for (const auto& f : frames) {
    check_frame(f, "encode_clip frame");
    require_same_shape(frames[0], f, "encode_clip frame");
  }
  EncodedClip clip;
  clip.channels = frames[0].dim(0);
  clip.height = frames[0].dim(1);
  clip.width = frames[0].dim(2);
  if (clip.width > 0xFFFF || clip.height > 0xFFFF || clip.channels > 0xFF) {
    throw std::invalid_argument("encode_clip: frame too large for the container");
  }
  clip.params = params;
  clip.frames.reserve(frames.size());
  const Tensor* keyframe = nullptr;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    EncodedFrame ef;
    if (t % params.gop_length == 0) {
      ef.type = FrameType::I;
      ef.pixels = frames[t];
      keyframe = &frames[t];
    } else {
      ef.type = FrameType::P;
      ef.motion = estimate_motion(*keyframe, frames[t], params.block_size, params.search_range);
      const Tensor pred = motion_compensate(*keyframe, ef.motion);
      ef.residual = Tensor(pred.shape());
      const double q = params.quant_step;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        ef.residual[i] = q == 0.0 ? exact_residual(frames[t][i], pred[i])
                                  : std::round((frames[t][i] - pred[i]) / q) * q;
      }
    }
    clip.frames.push_back(std::move(ef));
  }
  return clip;
}

DecodedClip decode_clip(const EncodedClip& clip) {
  DecodedClip out;
  out.frames.reserve(clip.frames.size());
  out.motion.reserve(clip.frames.size());
  const Tensor* keyframe = nullptr;
  for (std::size_t t = 0; t < clip.frames.size(); ++t) {
    const auto& ef = clip.frames[t];
    if (ef.type == FrameType::I) {
      out.frames.push_back(ef.pixels);
      out.motion.emplace_back(std::nullopt);
      keyframe = &out.frames.back();
      continue;
    }
    if (!keyframe) throw FormatError("decode_clip: P frame " + std::to_string(t) + " before any I frame");
    Tensor frame = motion_compensate(*keyframe, ef.motion);
    require_same_shape(frame, ef.residual, "decode_clip residual");
    for (std::size_t i = 0; i < frame.size(); ++i) frame[i] += ef.residual[i];
    out.frames.push_back(std::move(frame));
    out.motion.emplace_back(ef.motion);
    // push_back may have reallocated; re-anchor the keyframe pointer.
    keyframe = &out.frames[t - t % clip.params.gop_length];
  }
  return out;
}

std::vector<std::uint8_t> serialize_clip(const EncodedClip& clip) {
  validate_params(clip.params);
  io::ByteWriter w;
  w.magic("ARSG");
  w.u8(1);
  w.u16(static_cast<std::uint16_t>(clip.width));
  w.u16(static_cast<std::uint16_t>(clip.height));
  w.u16(static_cast<std::uint16_t>(clip.params.gop_length));
  w.u8(static_cast<std::uint8_t>(clip.params.block_size));
  w.u8(static_cast<std::uint8_t>(clip.params.search_range));
  w.f64(clip.params.quant_step);
  w.u8(static_cast<std::uint8_t>(clip.channels));
  w.u32(static_cast<std::uint32_t>(clip.frames.size()));
  for (const auto& f : clip.frames) {
    w.u8(static_cast<std::uint8_t>(f.type));
    if (f.type == FrameType::I) {
      w.f64s(f.pixels.data());
    } else {
      for (const auto& mv : f.motion.vectors) {
        w.i8(static_cast<std::int8_t>(mv.dx));
        w.i8(static_cast<std::int8_t>(mv.dy));
      }
      w.f64s(f.residual.data());
    }
  }
  return w.take();
}

EncodedClip parse_clip(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("ARSG", "clip header");
  const std::size_t version_at = r.offset();
  const auto version = r.u8("clip version");
  if (version != 1) {
    throw FormatError("unsupported clip version " + std::to_string(version), version_at);
  }
  EncodedClip clip;
  clip.width = r.u16("clip width");
  clip.height = r.u16("clip height");
  clip.params.gop_length = r.u16("gop length");
  clip.params.block_size = r.u8("block size");
  clip.params.search_range = r.u8("search range");
  clip.params.quant_step = r.f64("quant step");
  clip.channels = r.u8("channels");
  const std::size_t header_end = r.offset();
  try {
    validate_params(clip.params);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("corrupt clip header: ") + e.what(), header_end);
  }
  if (clip.width == 0 || clip.height == 0 || clip.channels == 0) {
    throw FormatError("corrupt clip header: zero frame dimension", header_end);
  }
  const std::uint32_t count = r.u32("frame count");
  const std::size_t by = (clip.height + clip.params.block_size - 1) / clip.params.block_size;
  const std::size_t bx = (clip.width + clip.params.block_size - 1) / clip.params.block_size;
  const Shape frame_shape{clip.channels, clip.height, clip.width};
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::size_t type_at = r.offset();
    const auto type = r.u8("frame type");
    const bool expect_i = t % clip.params.gop_length == 0;
    if (type > 1 || (type == 0) != expect_i) {
      throw FormatError("frame " + std::to_string(t) + " has type " + std::to_string(type) +
                            ", GOP structure requires " + (expect_i ? "I" : "P"),
                        type_at);
    }
    EncodedFrame f;
    f.type = static_cast<FrameType>(type);
    if (f.type == FrameType::I) {
      f.pixels = Tensor(frame_shape);
      r.f64s(f.pixels.data(), "I frame pixels");
    } else {
      f.motion.block_size = clip.params.block_size;
      f.motion.blocks_y = by;
      f.motion.blocks_x = bx;
      f.motion.vectors.resize(by * bx);
      for (auto& mv : f.motion.vectors) {
        const std::size_t at = r.offset();
        mv.dx = r.i8("motion vector");
        mv.dy = r.i8("motion vector");
        if (std::abs(mv.dx) > clip.params.search_range ||
            std::abs(mv.dy) > clip.params.search_range) {
          throw FormatError("motion vector exceeds search range", at);
        }
      }
      f.residual = Tensor(frame_shape);
      r.f64s(f.residual.data(), "P frame residual");
    }
    clip.frames.push_back(std::move(f));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last frame", r.offset());
  return clip;
}

void save_clip(const std::string& path, const EncodedClip& clip) {
  io::write_file(path, serialize_clip(clip));
}

EncodedClip load_clip(const std::string& path) { return parse_clip(io::read_file(path)); }

}  // namespace arseg::codec
