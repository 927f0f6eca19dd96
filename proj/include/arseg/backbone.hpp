#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "arseg/autograd.hpp"
#include "arseg/tensor.hpp"

namespace arseg::backbone {

struct ConvLayer {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool operator==(const ConvLayer&) const = default;
};

/// Segmentation network split into a feature sub-network, a task sub-network
/// ending in one bilinear upsample back to the branch input size, and a
/// final 1×1 convolution. Every feat/task conv is followed by a ramp.
struct BackboneArch {
  std::size_t in_channels = 1;
  std::vector<ConvLayer> feat{{16, 3, 2}, {32, 3, 2}, {32, 3, 1}, {32, 3, 1}};
  std::vector<ConvLayer> task{{32, 3, 1}, {16, 3, 1}};
  std::size_t feature_channels = 16;  // C, channels at the fusion point
  std::size_t num_classes = 3;        // K

  void validate() const;
  bool operator==(const BackboneArch&) const = default;
};

struct ConvWeights {
  Tensor weight;
  Tensor bias;
};

struct BackboneWeights {
  std::vector<ConvWeights> feat;
  std::vector<ConvWeights> task;
  // Shared between the HR and LR branch of one pipeline.
  std::shared_ptr<ConvWeights> final_conv;
};

BackboneWeights init_weights(const BackboneArch& arch, std::uint64_t seed);

/// One branch: the architecture run at input scale `scale` (alpha).
struct Branch {
  BackboneArch arch;
  double scale = 1.0;
  BackboneWeights weights;
};

/// round(alpha * extent); throws ShapeError when either side falls below 8.
std::pair<std::size_t, std::size_t> scaled_size(double scale, std::size_t height,
                                                std::size_t width);

// Tape-level forward passes.
struct ConvVars {
  ad::Var weight;
  ad::Var bias;
};
struct BackboneVars {
  std::vector<ConvVars> feat;
  std::vector<ConvVars> task;
  ConvVars final_conv;
};

BackboneVars bind(ad::Tape& tape, const BackboneWeights& w, bool train_body, bool train_final);

/// Resizes the frame to the branch scale and runs feat + task. Returns the
/// C×(αH)×(αW) map that feeds the final conv.
ad::Var features(const BackboneArch& arch, double scale, const BackboneVars& vars,
                 ad::Var frame);
ad::Var logits(const BackboneArch& arch, const BackboneVars& vars, ad::Var features);

// Inference conveniences on plain tensors.
Tensor forward_features(const Branch& branch, const Tensor& frame);
Tensor forward_logits(const Branch& branch, const Tensor& features);

/// Analytic operation counts (FLOPs). A conv costs 2·k²·C_in/g·C_out·H_out·W_out,
/// a bilinear resize 8·C·H_out·W_out, and each pointwise op one FLOP per element.
struct Cost {
  double conv = 0.0;
  double resize = 0.0;
  double pointwise = 0.0;
  double total() const { return conv + resize + pointwise; }
  Cost& operator+=(const Cost& o) {
    conv += o.conv;
    resize += o.resize;
    pointwise += o.pointwise;
    return *this;
  }
};

double conv_flops(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t groups,
                  std::size_t h_out, std::size_t w_out);
double resize_flops(std::size_t channels, std::size_t h_out, std::size_t w_out);

/// Cost of forward_features at `scale` on an H×W input, excluding the final conv.
Cost feature_cost(const BackboneArch& arch, double scale, std::size_t height, std::size_t width);
/// Cost of the final 1×1 conv applied on an H×W feature map.
Cost final_conv_cost(const BackboneArch& arch, std::size_t height, std::size_t width);
/// Full single-frame cost of a branch producing K×H×W logits (features upsampled
/// to H×W first when the branch runs below full scale).
Cost flops_of(const BackboneArch& arch, double scale, std::size_t height, std::size_t width);

// Weight checkpoints ("ARWT"): magic, u8 version, u32 tensor count, then per
// tensor u8 rank, u32 extents, f64 payload.
std::vector<std::uint8_t> encode_checkpoint(const std::vector<Tensor>& tensors);
std::vector<Tensor> decode_checkpoint(std::span<const std::uint8_t> bytes);

/// feat (w,b)..., task (w,b)..., then final (w,b) when `with_final`.
std::vector<Tensor> flatten(const BackboneWeights& w, bool with_final);
/// Inverse of flatten; the final conv is taken from `shared_final` when given.
BackboneWeights unflatten(const BackboneArch& arch, std::span<const Tensor> tensors,
                          std::shared_ptr<ConvWeights> shared_final);
/// Number of tensors flatten() produces.
std::size_t tensor_count(const BackboneArch& arch, bool with_final);

}  // namespace arseg::backbone
