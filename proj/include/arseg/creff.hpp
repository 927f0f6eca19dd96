#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "arseg/autograd.hpp"
#include "arseg/backbone.hpp"
#include "arseg/tensor.hpp"

// Cross-resolution feature fusion: warp keyframe HR features along block
// motion, then fold them into upsampled LR features through attention.
namespace arseg::creff {

enum class Variant {
  LocalAttention,       // "la"
  LocalAttentionDense,  // "la_dense": non-grouped QKV encoders
  GlobalAttention,      // "ga": pooled keys/values, attention over all positions
  ConvFusion,           // "conv": 3×3 conv over [warped, upsampled]
  WarpOnly,             // "warp_only": output is the warped HR feature
  NoFusion,             // "none": output is the upsampled LR feature
};

std::string variant_name(Variant v);
/// Throws std::invalid_argument for unknown names.
Variant parse_variant(const std::string& name);

struct FusionConfig {
  Variant variant = Variant::LocalAttention;
  std::size_t neighborhood = 7;        // n, odd
  std::size_t global_downsample = 32;  // keys/values pooled by 1/ds
  bool direct_connection = true;
  bool qkv_bias = false;

  void validate() const;
  bool uses_qkv() const;
  bool operator==(const FusionConfig&) const = default;
};

struct FusionWeights {
  backbone::ConvWeights value, key, query;  // attention variants
  backbone::ConvWeights fuse;               // ConvFusion
};

/// Identity-centred QKV encoders with small noise. Under a direct connection
/// the value encoder (or fusion conv) starts near zero instead.
FusionWeights init_fusion(const FusionConfig& cfg, std::size_t channels, std::uint64_t seed);
/// Encoders that copy their input: centre tap 1, everything else 0.
FusionWeights identity_fusion(const FusionConfig& cfg, std::size_t channels);

std::vector<Tensor> flatten(const FusionConfig& cfg, const FusionWeights& w);
FusionWeights unflatten(const FusionConfig& cfg, std::size_t channels,
                        std::span<const Tensor> tensors);
std::size_t tensor_count(const FusionConfig& cfg);

/// out(c,y,x) = F(c, clamp(y + M(1,y,x)), clamp(x + M(0,y,x))). MVs must be integral.
Tensor warp_features(const Tensor& features, const Tensor& motion);
ad::Var warp_features(ad::Var features, const Tensor& motion);

struct QKV {
  Tensor value, key, query;
};
QKV encode_qkv(const Tensor& warped, const Tensor& upsampled, const FusionConfig& cfg,
               const FusionWeights& w);

/// Softmax weights (n²)×H×W for each position's clamped neighbourhood, in
/// row-major neighbourhood order.
Tensor local_attention_weights(const Tensor& key, const Tensor& query, std::size_t n);
Tensor local_attention(const Tensor& value, const Tensor& key, const Tensor& query,
                       std::size_t n);
ad::Var local_attention(ad::Var value, ad::Var key, ad::Var query, std::size_t n);
/// Attention of every query position over all positions of (already pooled) key/value maps.
ad::Var global_attention(ad::Var value, ad::Var key, ad::Var query);

struct FusionVars {
  ad::Var value_w, value_b, key_w, key_b, query_w, query_b, fuse_w, fuse_b;
};
FusionVars bind(ad::Tape& tape, const FusionConfig& cfg, const FusionWeights& w, bool train);

/// F̃_P from keyframe features F_I (C×H×W), per-pixel motion M_P (2×H×W) and
/// LR features f_P (C×h×w).
ad::Var fuse(const FusionConfig& cfg, const FusionVars& vars, ad::Var keyframe_features,
             const Tensor& motion, ad::Var lr_features);
Tensor creff_forward(const Tensor& keyframe_features, const Tensor& motion,
                     const Tensor& lr_features, const FusionConfig& cfg,
                     const FusionWeights& w);

/// Analytic cost of one fusion at C×H×W from an LR map of lr_h×lr_w.
/// Softmax is charged four FLOPs per score (scale, exp, accumulate, divide).
backbone::Cost fusion_cost(const FusionConfig& cfg, std::size_t channels, std::size_t height,
                           std::size_t width, std::size_t lr_height, std::size_t lr_width);

}  // namespace arseg::creff
