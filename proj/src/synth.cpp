#include "arseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace arseg::synth {

namespace {

struct Shape {
  bool bar = false;
  double y = 0, x = 0;
  double vy = 0, vx = 0;
  // bars: half extents; discs: radius in ry
  double ry = 0, rx = 0;
  double angle = 0, spin = 0;
  double intensity = 0;
  bool visible = true;
};

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 256.0) / 256.0; }

}  // namespace

Clip moving_shapes(const ShapesOptions& opt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };
  auto speed = [&] { return uniform(-opt.max_speed, opt.max_speed); };
  const std::size_t h = opt.height, w = opt.width;

  // Smooth background from a few random plane waves.
  std::vector<double> background(h * w, 0.3);
  for (int k = 0; k < 3; ++k) {
    const double fy = uniform(0.1, 0.6), fx = uniform(0.1, 0.6), ph = uniform(0.0, 6.28);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        background[y * w + x] += 0.07 * std::sin(fy * y + fx * x + ph);
      }
    }
  }

  std::vector<Shape> shapes;
  for (std::size_t i = 0; i < opt.discs; ++i) {
    Shape s;
    s.y = uniform(0, h);
    s.x = uniform(0, w);
    s.ry = uniform(2.0, 4.0);
    s.vy = speed();
    s.vx = speed();
    s.intensity = uniform(0.75, 0.95);
    shapes.push_back(s);
  }
  for (std::size_t i = 0; i < opt.bars; ++i) {
    Shape s;
    s.bar = true;
    s.y = uniform(0, h);
    s.x = uniform(0, w);
    s.rx = uniform(4.0, 9.0);                // half length along the bar
    s.ry = u01(rng) < 0.5 ? 0.5 : 1.0;         // half thickness
    s.angle = u01(rng) < 0.5 ? 0.0 : 1.5707963267948966;
    s.spin = uniform(-opt.max_spin, opt.max_spin);
    s.vy = speed();
    s.vx = speed();
    s.intensity = uniform(0.75, 0.95);
    shapes.push_back(s);
  }

  Clip clip;
  for (std::size_t t = 0; t < opt.frames; ++t) {
    if (t > 0 && opt.blink_rate > 0.0) {
      for (auto& s : shapes) {
        if (u01(rng) < opt.blink_rate) s.visible = !s.visible;
      }
    }
    Tensor frame({1, h, w});
    LabelMap labels(h, w, 0);
    for (std::size_t i = 0; i < h * w; ++i) frame[i] = background[i];
    for (const auto& s : shapes) {
      if (!s.visible) continue;
      const double cy = s.y + s.vy * static_cast<double>(t);
      const double cx = s.x + s.vx * static_cast<double>(t);
      const double a = s.angle + s.spin * static_cast<double>(t);
      const double ca = std::cos(a), sa = std::sin(a);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          bool inside = dy * dy + dx * dx <= s.ry * s.ry;
          if (s.bar) {
            const double along = dx * ca + dy * sa, across = dy * ca - dx * sa;
            inside = across >= -s.ry && across < s.ry && along >= -s.rx && along < s.rx;
          }
          if (!inside) continue;
          frame[y * w + x] = s.intensity;
          labels.at(y, x) = s.bar ? 1 : 2;
        }
      }
    }
    if (opt.noise > 0.0) {
      std::normal_distribution<double> n(0.0, opt.noise);
      for (std::size_t i = 0; i < h * w; ++i) frame[i] += n(rng);
    }
    for (std::size_t i = 0; i < h * w; ++i) frame[i] = quantize(frame[i]);
    clip.frames.push_back(std::move(frame));
    clip.labels.push_back(std::move(labels));
  }
  return clip;
}

}  // namespace arseg::synth
