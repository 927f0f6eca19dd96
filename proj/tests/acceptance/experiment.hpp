#pragma once

// Desk-scale moving-shapes experiment shared by the acceptance suite.

#include <chrono>
#include <cstdio>
#include <optional>
#include <vector>

#include "arseg/codec.hpp"
#include "arseg/eval.hpp"
#include "arseg/fst.hpp"
#include "arseg/synth.hpp"

namespace experiment {

using namespace arseg;

struct Settings {
  std::size_t train_clips = 40;
  std::size_t train_frames = 16;
  std::size_t test_clips = 20;
  std::size_t test_frames = 20;
  std::size_t first_annotated = 14;  // test frames 14..19 carry labels
  std::size_t gop = 6;
  double lr_scale = 0.5;
  codec::CodecParams codec{6, 4, 16, 1.0 / 64.0};
  eval::MotionSearch search{4, 16};
  std::size_t hr_epochs = 6;
  std::size_t lr_epochs = 8;
  double hr_learning_rate = 0.02;
  double lr_learning_rate = 0.01;
  std::uint64_t seed = 7;
  synth::ShapesOptions shapes = [] {
    synth::ShapesOptions o;
    o.max_speed = 1.5;
    o.blink_rate = 0.1;
    o.max_spin = 0.08;
    o.noise = 0.02;
    return o;
  }();
  // Local attention, direct connection. A 3x3 window on 32x48 frames already
  // spans more of the frame than a 7x7 window does at camera resolution.
  creff::FusionConfig fusion = [] {
    creff::FusionConfig f;
    f.neighborhood = 3;
    return f;
  }();
  backbone::BackboneArch arch = [] {
    backbone::BackboneArch a;
    a.in_channels = 1;
    a.feat = {{16, 3, 1}, {32, 3, 2}, {48, 3, 1}, {48, 3, 1}};
    a.task = {{48, 3, 1}, {8, 3, 1}};
    a.feature_channels = 8;
    a.num_classes = 3;
    return a;
  }();
};

struct Data {
  std::vector<fst::LabeledFrame> hr_frames;  // decoded train frames with labels
  std::vector<fst::TrainPair> pairs;         // keyframe p-(L-1) -> p
  std::vector<eval::AnnotatedClip> test;     // decoded test clips
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<Tensor> decode(const std::vector<Tensor>& frames,
                                  const codec::CodecParams& params) {
  return codec::decode_clip(codec::encode_clip(frames, params)).frames;
}

inline Data make_data(const Settings& s) {
  Data d;
  synth::ShapesOptions opt = s.shapes;
  opt.frames = s.train_frames;
  for (std::size_t c = 0; c < s.train_clips; ++c) {
    const auto clip = synth::moving_shapes(opt, s.seed * 1000 + c);
    const auto frames = decode(clip.frames, s.codec);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      d.hr_frames.push_back({frames[t], clip.labels[t]});
    }
    for (std::size_t p = s.gop - 1; p < frames.size(); ++p) {
      const std::size_t i = p - (s.gop - 1);
      const auto field =
          codec::estimate_motion(frames[i], frames[p], s.search.block_size, s.search.search_range);
      d.pairs.push_back({frames[i], frames[p],
                         codec::expand_mv(field, frames[p].dim(1), frames[p].dim(2)),
                         clip.labels[p]});
    }
  }
  opt.frames = s.test_frames;
  for (std::size_t c = 0; c < s.test_clips; ++c) {
    const auto clip = synth::moving_shapes(opt, s.seed * 1000 + 500 + c);
    eval::AnnotatedClip a;
    a.frames = decode(clip.frames, s.codec);
    for (std::size_t p = s.first_annotated; p < s.test_frames; ++p) a.labels[p] = clip.labels[p];
    d.test.push_back(std::move(a));
  }
  return d;
}

inline double mean_loss(const std::vector<fst::LossRecord>& h, std::size_t epoch,
                        std::size_t per_epoch) {
  double s = 0.0;
  for (std::size_t i = epoch * per_epoch; i < (epoch + 1) * per_epoch; ++i) s += h[i].total;
  return s / static_cast<double>(per_epoch);
}

struct Trained {
  backbone::Branch hr;
  backbone::Branch lr_baseline;
  fst::ArModel full;
  fst::ArModel no_dc;
  std::vector<fst::LossRecord> full_history;
  std::size_t pairs = 0;
};

inline fst::TrainOptions options(std::size_t epochs, double lr, std::uint64_t seed) {
  fst::TrainOptions o;
  o.epochs = epochs;
  o.learning_rate = lr;
  o.seed = seed;
  return o;
}

inline Trained train_all(const Settings& s, const Data& d, bool verbose) {
  Trained t;
  auto t0 = std::chrono::steady_clock::now();
  t.hr.arch = s.arch;
  t.hr.scale = 1.0;
  t.hr.weights = backbone::init_weights(s.arch, s.seed);
  fst::train_hr_branch(t.hr, d.hr_frames, options(s.hr_epochs, s.hr_learning_rate, s.seed));
  std::vector<Tensor> frames;
  for (const auto& f : d.hr_frames) frames.push_back(f.frame);
  fst::normalize_feature_scale(t.hr, frames);
  if (verbose) std::printf("  [exp] HR branch trained in %.1fs\n", seconds_since(t0));

  // Plain LR baseline: same body, own final conv, CE only at alpha.
  t0 = std::chrono::steady_clock::now();
  t.lr_baseline.arch = s.arch;
  t.lr_baseline.scale = s.lr_scale;
  t.lr_baseline.weights = t.hr.weights;
  t.lr_baseline.weights.final_conv =
      std::make_shared<backbone::ConvWeights>(*t.hr.weights.final_conv);
  std::vector<fst::LabeledFrame> lr_frames;
  for (const auto& p : d.pairs) lr_frames.push_back({p.target, p.labels});
  fst::train_hr_branch(t.lr_baseline, lr_frames,
                       options(s.lr_epochs, s.lr_learning_rate, s.seed + 1));
  if (verbose) std::printf("  [exp] LR baseline trained in %.1fs\n", seconds_since(t0));

  t0 = std::chrono::steady_clock::now();
  creff::FusionConfig fusion = s.fusion;
  t.full = fst::make_ar_model(t.hr, s.lr_scale, fusion, s.seed + 2);
  t.full_history =
      fst::train_lr_branch(t.full, d.pairs, options(s.lr_epochs, s.lr_learning_rate, s.seed + 3));
  t.pairs = d.pairs.size();
  if (verbose) std::printf("  [exp] AR (LA + DC) trained in %.1fs\n", seconds_since(t0));

  t0 = std::chrono::steady_clock::now();
  fusion.direct_connection = false;
  t.no_dc = fst::make_ar_model(t.hr, s.lr_scale, fusion, s.seed + 2);
  fst::train_lr_branch(t.no_dc, d.pairs, options(s.lr_epochs, s.lr_learning_rate, s.seed + 3));
  if (verbose) std::printf("  [exp] AR without DC trained in %.1fs\n", seconds_since(t0));
  return t;
}

/// Mean feature MSE to the HR features of the target over the test pairs at
/// distance L-1, for the given pipeline.
inline double fused_feature_mse(const fst::ArModel& m, const Settings& s, const Data& d) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& clip : d.test) {
    for (const auto& [p, gt] : clip.labels) {
      const std::size_t i = p - (s.gop - 1);
      const auto field = codec::estimate_motion(clip.frames[i], clip.frames[p],
                                                s.search.block_size, s.search.search_range);
      const Tensor mv = codec::expand_mv(field, clip.frames[p].dim(1), clip.frames[p].dim(2));
      const Tensor key = backbone::forward_features(m.hr, clip.frames[i]);
      const Tensor target = backbone::forward_features(m.hr, clip.frames[p]);
      const Tensor lr = backbone::forward_features(m.lr, clip.frames[p]);
      const Tensor fused = creff::creff_forward(key, mv, lr, m.fusion, m.fusion_weights);
      sum += ops::mse(fused, target);
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

}  // namespace experiment
