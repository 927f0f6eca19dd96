// Command-line front end: synthetic data, encoding, training, inference,
// evaluation and BD comparison.
//
// Exit codes: 0 success, 2 input or format error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "arseg/binary_io.hpp"
#include "arseg/codec.hpp"
#include "arseg/config.hpp"
#include "arseg/errors.hpp"
#include "arseg/eval.hpp"
#include "arseg/fst.hpp"
#include "arseg/synth.hpp"
#include "arseg/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace arseg;

namespace {

constexpr int kInputError = 2;
constexpr int kNumericalError = 3;

std::string frame_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.tnsr", index);
  return buf;
}

/// *.tnsr files of a directory keyed by the integer in their stem.
std::map<std::size_t, fs::path> indexed_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir);
  std::map<std::size_t, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".tnsr") continue;
    const std::string stem = entry.path().stem().string();
    std::size_t used = 0;
    std::size_t index = 0;
    try {
      index = std::stoul(stem, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != stem.size()) throw FormatError("file name is not a frame index: " + entry.path().string());
    out[index] = entry.path();
  }
  return out;
}

std::vector<Tensor> load_frames(const std::string& dir) {
  std::vector<Tensor> frames;
  std::size_t expect = 0;
  for (const auto& [index, path] : indexed_files(dir)) {
    if (index != expect) throw FormatError("frame " + std::to_string(expect) + " missing in " + dir);
    frames.push_back(io::load_tensor(path.string()));
    ++expect;
  }
  if (frames.empty()) throw FormatError("no frames in " + dir);
  return frames;
}

std::map<std::size_t, LabelMap> load_label_dir(const std::string& dir) {
  std::map<std::size_t, LabelMap> out;
  for (const auto& [index, path] : indexed_files(dir)) out[index] = io::load_labels(path.string());
  return out;
}

eval::AnnotatedClip load_annotated(const std::string& clip_path, const std::string& label_dir) {
  eval::AnnotatedClip a;
  a.frames = codec::decode_clip(codec::load_clip(clip_path)).frames;
  a.labels = load_label_dir(label_dir);
  for (const auto& [p, l] : a.labels) {
    if (p >= a.frames.size()) {
      throw FormatError("label for frame " + std::to_string(p) + " but " + clip_path + " has " +
                        std::to_string(a.frames.size()) + " frames");
    }
  }
  return a;
}

void require_pairs(const std::vector<std::string>& clips, const std::vector<std::string>& labels) {
  if (clips.size() != labels.size()) {
    throw std::invalid_argument("every --clip needs a matching --labels directory");
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
}

fst::ArModel load_pipeline(const std::string& hr_path, const std::string& lr_path,
                           const std::string& fusion_override) {
  const auto hr = config::load_hr(hr_path);
  auto model = config::load_lr(lr_path, hr);
  if (!fusion_override.empty()) {
    const auto v = creff::parse_variant(fusion_override);
    if (v != model.fusion.variant) {
      if (v != creff::Variant::WarpOnly && v != creff::Variant::NoFusion) {
        throw std::invalid_argument("--fusion " + fusion_override +
                                    " needs weights; the LR checkpoint holds " +
                                    creff::variant_name(model.fusion.variant));
      }
      model.fusion.variant = v;
      model.fusion_weights = {};
    }
  }
  return model;
}

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::string out;
  std::size_t frames = 16;
  std::uint64_t seed = 0;
  synth::ShapesOptions shapes;
};

void run_synth(const SynthArgs& a) {
  synth::ShapesOptions opt = a.shapes;
  opt.frames = a.frames;
  const auto clip = synth::moving_shapes(opt, a.seed);
  fs::create_directories(fs::path(a.out) / "frames");
  fs::create_directories(fs::path(a.out) / "labels");
  for (std::size_t t = 0; t < clip.frames.size(); ++t) {
    io::save_tensor((fs::path(a.out) / "frames" / frame_name(t)).string(), clip.frames[t]);
    io::save_labels((fs::path(a.out) / "labels" / frame_name(t)).string(), clip.labels[t]);
  }
  std::printf("wrote %zu frames and labels under %s\n", clip.frames.size(), a.out.c_str());
}

struct EncodeArgs {
  std::string in, out;
  codec::CodecParams params;
};

void run_encode(const EncodeArgs& a) {
  const auto frames = load_frames(a.in);
  const auto clip = codec::encode_clip(frames, a.params);
  codec::save_clip(a.out, clip);
  std::printf("encoded %zu frames in %zu GOPs to %s\n", frames.size(), clip.gop_count(),
              a.out.c_str());
}

struct TrainArgs {
  std::vector<std::string> clips, labels;
  std::string config, out, hr_ckpt, history;
};

void run_train_hr(const TrainArgs& a) {
  require_pairs(a.clips, a.labels);
  const auto cfg = config::load_model_config(a.config);
  std::vector<fst::LabeledFrame> data;
  for (std::size_t i = 0; i < a.clips.size(); ++i) {
    const auto clip = load_annotated(a.clips[i], a.labels[i]);
    for (const auto& [p, l] : clip.labels) data.push_back({clip.frames[p], l});
  }
  if (data.empty()) throw std::invalid_argument("no annotated frames");
  backbone::Branch hr{cfg.arch, 1.0, backbone::init_weights(cfg.arch, cfg.init_seed)};
  const auto history = fst::train_hr_branch(hr, data, cfg.train);
  std::vector<Tensor> frames;
  for (const auto& d : data) frames.push_back(d.frame);
  const double s = fst::normalize_feature_scale(hr, frames);
  config::save_hr(a.out, hr);
  if (!a.history.empty()) write_text(a.history, fst::loss_history_csv(history));
  std::printf("trained HR branch on %zu frames (%zu steps, final loss %.4f, feature scale %.4f)\n",
              data.size(), history.size(), history.empty() ? 0.0 : history.back().total, s);
}

void run_train_lr(const TrainArgs& a) {
  require_pairs(a.clips, a.labels);
  const auto cfg = config::load_model_config(a.config);
  const auto hr = config::load_hr(a.hr_ckpt);
  std::vector<fst::TrainPair> pairs;
  for (std::size_t i = 0; i < a.clips.size(); ++i) {
    const auto encoded = codec::load_clip(a.clips[i]);
    const auto clip = load_annotated(a.clips[i], a.labels[i]);
    const std::size_t l = encoded.params.gop_length;
    for (const auto& [p, labels] : clip.labels) {
      if (p + 1 < l) continue;  // no keyframe at distance L-1
      const auto& key = clip.frames[p - (l - 1)];
      const auto& target = clip.frames[p];
      const auto field = codec::estimate_motion(key, target, encoded.params.block_size,
                                                encoded.params.search_range);
      pairs.push_back({key, target, codec::expand_mv(field, target.dim(1), target.dim(2)), labels});
    }
  }
  if (pairs.empty()) throw std::invalid_argument("no annotated frame has a keyframe at distance L-1");
  auto model = fst::make_ar_model(hr, cfg.lr_scale, cfg.fusion, cfg.init_seed);
  const auto history = fst::train_lr_branch(model, pairs, cfg.train);
  config::save_lr(a.out, model);
  if (!a.history.empty()) write_text(a.history, fst::loss_history_csv(history));
  std::printf("trained LR branch (%s) on %zu pairs (%zu steps, final loss %.4f)\n",
              creff::variant_name(model.fusion.variant).c_str(), pairs.size(), history.size(),
              history.empty() ? 0.0 : history.back().total);
}

struct InferArgs {
  std::string clip, hr_ckpt, lr_ckpt, fusion, out;
};

void run_infer(const InferArgs& a) {
  const auto model = load_pipeline(a.hr_ckpt, a.lr_ckpt, a.fusion);
  const auto out = eval::run_sequence(codec::load_clip(a.clip), model);
  fs::create_directories(a.out);
  for (std::size_t t = 0; t < out.labels.size(); ++t) {
    io::save_labels((fs::path(a.out) / frame_name(t)).string(), out.labels[t]);
  }
  std::printf("segmented %zu frames (%.0f FLOPs, %.0f per frame)\n", out.labels.size(), out.flops,
              out.flops / static_cast<double>(out.labels.size()));
}

struct EvalArgs {
  std::vector<std::string> clips, labels;
  std::string hr_ckpt, lr_ckpt, fusion, report;
  std::size_t gop = 0;
  eval::MotionSearch search;
  std::int32_t ignore = 255;
};

void run_eval(const EvalArgs& a) {
  require_pairs(a.clips, a.labels);
  const auto model = load_pipeline(a.hr_ckpt, a.lr_ckpt, a.fusion);
  std::vector<eval::AnnotatedClip> clips;
  std::size_t gop = a.gop;
  for (std::size_t i = 0; i < a.clips.size(); ++i) {
    if (gop == 0) gop = codec::load_clip(a.clips[i]).params.gop_length;
    clips.push_back(load_annotated(a.clips[i], a.labels[i]));
  }
  const auto table = eval::miou_by_distance(clips, model, gop, a.search, a.ignore);
  const auto& f = clips.front().frames.front();
  const auto cost = eval::pipeline_cost(model, f.dim(1), f.dim(2), gop);
  const std::string csv = eval::distance_report_csv(table, cost);
  if (a.report.empty()) {
    std::cout << csv;
  } else {
    write_text(a.report, csv);
    std::printf("overall mIoU %s over L=%zu, %.2f%% of all-HR cost\n",
                table.overall ? std::to_string(*table.overall).c_str() : "undefined", gop,
                cost.ratio * 100.0);
  }
}

struct BdArgs {
  std::string anchor, test;
};

std::string read_text(const std::string& path) {
  const auto bytes = io::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void run_bd(const BdArgs& a) {
  const auto r = eval::bd_metrics(eval::read_rate_curve_csv(read_text(a.anchor)),
                                  eval::read_rate_curve_csv(read_text(a.test)));
  std::printf("bd_miou,bd_flops_percent\n%.6f,%.6f\n", r.bd_miou, r.bd_flops_percent);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arseg: segmentation of compressed video with low-resolution non-keyframes"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic moving-shapes clip");
  synth_cmd->add_option("--out", synth_args.out, "output directory")->required();
  synth_cmd->add_option("--frames", synth_args.frames, "frame count");
  synth_cmd->add_option("--seed", synth_args.seed, "random seed");
  synth_cmd->add_option("--height", synth_args.shapes.height);
  synth_cmd->add_option("--width", synth_args.shapes.width);
  synth_cmd->add_option("--speed", synth_args.shapes.max_speed, "max pixels per frame per axis");
  synth_cmd->add_option("--blink", synth_args.shapes.blink_rate, "visibility toggle probability");
  synth_cmd->add_option("--spin", synth_args.shapes.max_spin, "max bar rotation per frame");
  synth_cmd->add_option("--noise", synth_args.shapes.noise, "pixel noise std");

  EncodeArgs enc;
  auto* enc_cmd = app.add_subcommand("encode", "encode a directory of frames");
  enc_cmd->add_option("--in", enc.in, "directory of NNNN.tnsr frames")->required();
  enc_cmd->add_option("--out", enc.out, "output .arsg clip")->required();
  enc_cmd->add_option("--gop", enc.params.gop_length, "GOP length L");
  enc_cmd->add_option("--block", enc.params.block_size, "block size");
  enc_cmd->add_option("--search", enc.params.search_range, "search range");
  enc_cmd->add_option("--quant", enc.params.quant_step, "residual quantization step (0 = lossless)");

  TrainArgs thr;
  auto* thr_cmd = app.add_subcommand("train-hr", "train the HR branch");
  thr_cmd->add_option("--clip", thr.clips, "encoded clip (repeatable)")->required();
  thr_cmd->add_option("--labels", thr.labels, "label directory per clip")->required();
  thr_cmd->add_option("--config", thr.config, "model config JSON")->required();
  thr_cmd->add_option("--out", thr.out, "checkpoint path")->required();
  thr_cmd->add_option("--history", thr.history, "loss history CSV");

  TrainArgs tlr;
  auto* tlr_cmd = app.add_subcommand("train-lr", "train the LR branch and fusion");
  tlr_cmd->add_option("--clip", tlr.clips, "encoded clip (repeatable)")->required();
  tlr_cmd->add_option("--labels", tlr.labels, "label directory per clip")->required();
  tlr_cmd->add_option("--hr-ckpt", tlr.hr_ckpt, "HR checkpoint")->required();
  tlr_cmd->add_option("--config", tlr.config, "model config JSON")->required();
  tlr_cmd->add_option("--out", tlr.out, "checkpoint path")->required();
  tlr_cmd->add_option("--history", tlr.history, "loss history CSV");

  InferArgs inf;
  auto* inf_cmd = app.add_subcommand("infer", "segment every frame of a clip");
  inf_cmd->add_option("--clip", inf.clip)->required();
  inf_cmd->add_option("--hr-ckpt", inf.hr_ckpt)->required();
  inf_cmd->add_option("--lr-ckpt", inf.lr_ckpt)->required();
  inf_cmd->add_option("--fusion", inf.fusion, "override: warp_only or none");
  inf_cmd->add_option("--out", inf.out, "label directory")->required();

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "mIoU per keyframe distance and amortized cost");
  ev_cmd->add_option("--clip", ev.clips, "encoded clip (repeatable)")->required();
  ev_cmd->add_option("--labels", ev.labels, "label directory per clip")->required();
  ev_cmd->add_option("--hr-ckpt", ev.hr_ckpt)->required();
  ev_cmd->add_option("--lr-ckpt", ev.lr_ckpt)->required();
  ev_cmd->add_option("--fusion", ev.fusion, "override: warp_only or none");
  ev_cmd->add_option("--gop", ev.gop, "GOP length (default: the first clip's)");
  ev_cmd->add_option("--block", ev.search.block_size, "motion search block size");
  ev_cmd->add_option("--search", ev.search.search_range, "motion search range");
  ev_cmd->add_option("--ignore", ev.ignore, "ignore label");
  ev_cmd->add_option("--report", ev.report, "CSV output (default: stdout)");

  BdArgs bd;
  auto* bd_cmd = app.add_subcommand("bd", "BD-mIoU and BD-FLOPs of two rate curves");
  bd_cmd->add_option("--anchor", bd.anchor, "CSV with header flops,miou")->required();
  bd_cmd->add_option("--test", bd.test, "CSV with header flops,miou")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    if (synth_cmd->parsed()) run_synth(synth_args);
    if (enc_cmd->parsed()) run_encode(enc);
    if (thr_cmd->parsed()) run_train_hr(thr);
    if (tlr_cmd->parsed()) run_train_lr(tlr);
    if (inf_cmd->parsed()) run_infer(inf);
    if (ev_cmd->parsed()) run_eval(ev);
    if (bd_cmd->parsed()) run_bd(bd);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumericalError;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error at byte %zu: %s\n", e.offset(), e.what());
    return kInputError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInputError;
  }
  return 0;
}
