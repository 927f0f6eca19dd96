#pragma once

#include <string>

#include "arseg/backbone.hpp"
#include "arseg/creff.hpp"
#include "arseg/fst.hpp"

// JSON configuration and checkpoint sidecars.
//
// A model config looks like
//   {"arch": {"in_channels": 1, "feat": [[16,3,2], ...], "task": [[32,3,1], ...],
//             "feature_channels": 16, "num_classes": 3},
//    "lr_scale": 0.5,
//    "fusion": {"variant": "la", "neighborhood": 7, "global_downsample": 32,
//               "direct_connection": true, "qkv_bias": false},
//    "train": {"epochs": 1, "learning_rate": 0.01, "momentum": 0.9, "seed": 0,
//              "feature_loss": "mse", "ignore_index": 255, "shuffle": true}}
// Every key is optional; missing keys keep their defaults.
namespace arseg::config {

struct ModelConfig {
  backbone::BackboneArch arch;
  double lr_scale = 0.5;
  creff::FusionConfig fusion;
  fst::TrainOptions train;
  std::uint64_t init_seed = 0;
};

/// Throws FormatError on malformed JSON or wrongly typed fields.
ModelConfig parse_model_config(const std::string& json_text);
std::string dump_model_config(const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);

/// HR checkpoint: ARWT file with body and final conv, plus `<path>.json`
/// holding the architecture.
void save_hr(const std::string& path, const backbone::Branch& hr);
backbone::Branch load_hr(const std::string& path);

/// LR checkpoint: ARWT file with the LR body (no final conv) followed by the
/// fusion tensors, plus `<path>.json` with architecture, scale and fusion.
void save_lr(const std::string& path, const fst::ArModel& model);
/// Rebuilds the pipeline around a loaded HR branch, sharing its final conv.
fst::ArModel load_lr(const std::string& path, const backbone::Branch& hr);

}  // namespace arseg::config
