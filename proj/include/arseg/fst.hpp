#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arseg/autograd.hpp"
#include "arseg/backbone.hpp"
#include "arseg/creff.hpp"
#include "arseg/tensor.hpp"

// Feature similarity training for the LR branch, plus the plain CE training
// that produces the frozen HR branch.
namespace arseg::fst {

/// HR branch, LR branch and the fusion module between them. The LR branch's
/// final conv is the HR branch's, shared by pointer.
struct ArModel {
  backbone::Branch hr;
  backbone::Branch lr;
  creff::FusionConfig fusion;
  creff::FusionWeights fusion_weights;
};

/// LR branch initialised from a copy of the HR body, sharing its final conv.
ArModel make_ar_model(const backbone::Branch& hr, double lr_scale,
                      const creff::FusionConfig& fusion, std::uint64_t seed);

struct LabeledFrame {
  Tensor frame;
  LabelMap labels;
};

/// Keyframe i = p - (L - 1), annotated frame p, and motion from p into i.
struct TrainPair {
  Tensor keyframe;
  Tensor target;
  Tensor motion;  // 2×H×W, integral
  LabelMap labels;
};

enum class FeatureLoss { Mse, Kl };

struct TrainOptions {
  std::size_t epochs = 1;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  FeatureLoss feature_loss = FeatureLoss::Mse;
  std::int32_t ignore_index = 255;
  bool shuffle = true;
};

struct LossRecord {
  std::size_t step = 0;
  double total = 0.0;
  double ce = 0.0;
  double feature = 0.0;
};

struct LossParts {
  double total = 0.0;
  double ce = 0.0;
  double mse = 0.0;
};

/// total = CE(S_P, G_P) + MSE(F̃_P, F_P), with both parts reported.
LossParts fst_loss(const Tensor& seg_logits, const LabelMap& labels, const Tensor& fused,
                   const Tensor& hr_features, std::int32_t ignore_index);

struct LossVars {
  ad::Var total;
  ad::Var ce;
  ad::Var feature;
};
LossVars fst_loss(ad::Var seg_logits, const LabelMap& labels, ad::Var fused,
                  ad::Var hr_features, std::int32_t ignore_index);

/// Logits at the labels' resolution: features are upsampled to H×W before the
/// final conv when the branch runs below full scale.
ad::Var full_res_logits(const backbone::Branch& branch, const backbone::BackboneVars& vars,
                        ad::Var frame);

/// Standard CE training of every parameter of `branch` (body and final conv)
/// by SGD with momentum. Used for the HR branch and for constant-resolution
/// baselines.
std::vector<LossRecord> train_hr_branch(backbone::Branch& branch,
                                        std::span<const LabeledFrame> data,
                                        const TrainOptions& opt);

/// Trains the LR body and fusion weights under CE + feature similarity while
/// the HR branch and shared final conv stay fixed.
std::vector<LossRecord> train_lr_branch(ArModel& model, std::span<const TrainPair> data,
                                        const TrainOptions& opt);

/// Rescales the HR branch so its features have unit root-mean-square over
/// `frames` while logits stay unchanged: the last task conv is divided by s
/// and the final conv multiplied by s (exact because the ramp is positively
/// homogeneous). Keeps the feature term of the loss on the same footing as
/// cross entropy. Returns s.
double normalize_feature_scale(backbone::Branch& hr, std::span<const Tensor> frames);

/// Bytes of every frozen parameter (HR body + shared final conv).
std::vector<std::uint8_t> frozen_bytes(const ArModel& model);

std::string loss_history_csv(std::span<const LossRecord> history);

}  // namespace arseg::fst
