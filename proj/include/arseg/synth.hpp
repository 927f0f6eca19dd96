#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "arseg/tensor.hpp"

// Synthetic moving-shapes clips: a static textured background with thin bars
// (class 1) and small discs (class 2) translating at sub-pixel velocities. Objects
// may blink, i.e. vanish and reappear, which block motion cannot explain.
namespace arseg::synth {

struct ShapesOptions {
  std::size_t height = 32;
  std::size_t width = 48;
  std::size_t frames = 16;
  std::size_t bars = 3;
  std::size_t discs = 3;
  double max_speed = 1.0;    // per-axis pixels per frame, drawn uniformly (sub-pixel)
  double blink_rate = 0.0;   // per-frame probability that an object toggles visibility
  double max_spin = 0.0;     // bar rotation, radians per frame, drawn uniformly
  double noise = 0.0;        // std of per-frame Gaussian pixel noise
};

struct Clip {
  std::vector<Tensor> frames;    // 1×H×W, values on the k/256 grid
  std::vector<LabelMap> labels;  // one per frame
};

Clip moving_shapes(const ShapesOptions& opt, std::uint64_t seed);

}  // namespace arseg::synth
