#include "arseg/creff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <stdexcept>

#include "arseg/errors.hpp"
#include "arseg/tensor_ops.hpp"

namespace arseg::creff {

using backbone::ConvWeights;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::LocalAttention: return "la";
    case Variant::LocalAttentionDense: return "la_dense";
    case Variant::GlobalAttention: return "ga";
    case Variant::ConvFusion: return "conv";
    case Variant::WarpOnly: return "warp_only";
    case Variant::NoFusion: return "none";
  }
  return "la";
}

Variant parse_variant(const std::string& name) {
  for (auto v : {Variant::LocalAttention, Variant::LocalAttentionDense, Variant::GlobalAttention,
                 Variant::ConvFusion, Variant::WarpOnly, Variant::NoFusion}) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown fusion variant '" + name +
                              "' (expected la, la_dense, ga, conv, warp_only, none)");
}

void FusionConfig::validate() const {
  if (neighborhood == 0 || neighborhood % 2 == 0) {
    throw std::invalid_argument("fusion: neighbourhood side must be odd and >= 1, got " +
                                std::to_string(neighborhood));
  }
  if (global_downsample == 0) throw std::invalid_argument("fusion: downsample factor must be >= 1");
}

bool FusionConfig::uses_qkv() const {
  return variant == Variant::LocalAttention || variant == Variant::LocalAttentionDense ||
         variant == Variant::GlobalAttention;
}

namespace {

std::size_t qkv_groups(const FusionConfig& cfg, std::size_t channels) {
  return cfg.variant == Variant::LocalAttentionDense ? 1 : channels;
}

ConvWeights identity_encoder(std::size_t channels, std::size_t groups) {
  const std::size_t per_group = channels / groups;
  ConvWeights w{Tensor({channels, per_group, 3, 3}), Tensor({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t local = c % per_group;
    w.weight[((c * per_group + local) * 3 + 1) * 3 + 1] = 1.0;
  }
  return w;
}

void check_conv_shape(const ConvWeights& w, const Shape& expected, const char* what) {
  if (w.weight.shape() != expected) {
    throw ShapeError(std::string("fusion ") + what + " weights have shape " +
                     shape_str(w.weight.shape()) + ", variant expects " + shape_str(expected));
  }
  if (w.bias.shape() != Shape{expected[0]}) {
    throw ShapeError(std::string("fusion ") + what + " bias has shape " +
                     shape_str(w.bias.shape()));
  }
}

void check_weights(const FusionConfig& cfg, const FusionWeights& w, std::size_t channels) {
  if (cfg.uses_qkv()) {
    const Shape s{channels, channels / qkv_groups(cfg, channels), 3, 3};
    check_conv_shape(w.value, s, "value");
    check_conv_shape(w.key, s, "key");
    check_conv_shape(w.query, s, "query");
  } else if (cfg.variant == Variant::ConvFusion) {
    check_conv_shape(w.fuse, {channels, 2 * channels, 3, 3}, "conv");
  }
}

}  // namespace

FusionWeights identity_fusion(const FusionConfig& cfg, std::size_t channels) {
  cfg.validate();
  FusionWeights w;
  if (cfg.uses_qkv()) {
    const std::size_t g = qkv_groups(cfg, channels);
    w.value = identity_encoder(channels, g);
    w.key = identity_encoder(channels, g);
    w.query = identity_encoder(channels, g);
  } else if (cfg.variant == Variant::ConvFusion) {
    w.fuse = {Tensor({channels, 2 * channels, 3, 3}), Tensor({channels})};
  }
  return w;
}

FusionWeights init_fusion(const FusionConfig& cfg, std::size_t channels, std::uint64_t seed) {
  FusionWeights w = identity_fusion(cfg, channels);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 0.1);
  // With a direct connection the attended branch starts near zero, so the
  // fused output begins as the upsampled LR features.
  const bool residual = cfg.direct_connection;
  if (cfg.uses_qkv()) {
    for (auto* enc : {&w.value, &w.key, &w.query}) {
      const bool quiet = residual && enc == &w.value;
      for (auto& v : enc->weight.data()) v = quiet ? 0.1 * jitter(rng) : v + jitter(rng);
    }
  } else if (cfg.variant == Variant::ConvFusion) {
    const double scale = residual ? 0.1 : 1.0;
    std::normal_distribution<double> he(0.0, std::sqrt(1.0 / static_cast<double>(18 * channels)));
    for (auto& v : w.fuse.weight.data()) v = scale * he(rng);
  }
  return w;
}

std::size_t tensor_count(const FusionConfig& cfg) {
  if (cfg.uses_qkv()) return 6;
  return cfg.variant == Variant::ConvFusion ? 2 : 0;
}

std::vector<Tensor> flatten(const FusionConfig& cfg, const FusionWeights& w) {
  if (cfg.uses_qkv()) {
    return {w.value.weight, w.value.bias, w.key.weight, w.key.bias, w.query.weight, w.query.bias};
  }
  if (cfg.variant == Variant::ConvFusion) return {w.fuse.weight, w.fuse.bias};
  return {};
}

FusionWeights unflatten(const FusionConfig& cfg, std::size_t channels,
                        std::span<const Tensor> t) {
  if (t.size() != tensor_count(cfg)) {
    throw FormatError("fusion checkpoint holds " + std::to_string(t.size()) +
                      " tensors, variant " + variant_name(cfg.variant) + " needs " +
                      std::to_string(tensor_count(cfg)));
  }
  FusionWeights w;
  if (cfg.uses_qkv()) {
    w.value = {t[0], t[1]};
    w.key = {t[2], t[3]};
    w.query = {t[4], t[5]};
  } else if (cfg.variant == Variant::ConvFusion) {
    w.fuse = {t[0], t[1]};
  }
  check_weights(cfg, w, channels);
  return w;
}

// ---------------------------------------------------------------- warping

namespace {

std::vector<std::size_t> warp_index(const Tensor& motion, std::size_t h, std::size_t w) {
  require_rank(motion, 3, "motion field");
  if (motion.dim(0) != 2 || motion.dim(1) != h || motion.dim(2) != w) {
    throw ShapeError("warp: motion field " + shape_str(motion.shape()) +
                     " does not match feature plane " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  std::vector<std::size_t> index(h * w);
  const auto clampi = [](double v, std::size_t extent) {
    const auto i = static_cast<long>(v);
    return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(extent) - 1));
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double mx = motion.at(0, y, x), my = motion.at(1, y, x);
      if (mx != std::floor(mx) || my != std::floor(my)) {
        throw std::invalid_argument("warp: motion vectors must be integral");
      }
      const std::size_t sx = clampi(static_cast<double>(x) + mx, w);
      const std::size_t sy = clampi(static_cast<double>(y) + my, h);
      index[y * w + x] = sy * w + sx;
    }
  }
  return index;
}

}  // namespace

ad::Var warp_features(ad::Var features, const Tensor& motion) {
  const auto& f = features.value();
  require_rank(f, 3, "warp features");
  return ad::gather_plane(features, warp_index(motion, f.dim(1), f.dim(2)), f.dim(1), f.dim(2));
}

Tensor warp_features(const Tensor& features, const Tensor& motion) {
  ad::Tape tape;
  return warp_features(tape.leaf(features), motion).value();
}

// -------------------------------------------------------------- attention

namespace {

// Candidate key/value positions per query. With `shared` every query sees
// the same list (global attention).
struct Candidates {
  std::size_t per_query = 0;
  bool shared = false;
  std::vector<std::uint32_t> index;

  const std::uint32_t* of(std::size_t q) const {
    return index.data() + (shared ? 0 : q * per_query);
  }
};

Candidates local_candidates(std::size_t h, std::size_t w, std::size_t n) {
  Candidates c;
  c.per_query = n * n;
  c.index.reserve(h * w * n * n);
  const long r = static_cast<long>(n / 2);
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      for (long dy = -r; dy <= r; ++dy) {
        const long sy = std::clamp<long>(y + dy, 0, static_cast<long>(h) - 1);
        for (long dx = -r; dx <= r; ++dx) {
          const long sx = std::clamp<long>(x + dx, 0, static_cast<long>(w) - 1);
          c.index.push_back(static_cast<std::uint32_t>(sy * static_cast<long>(w) + sx));
        }
      }
    }
  }
  return c;
}

Candidates all_candidates(std::size_t plane) {
  Candidates c;
  c.per_query = plane;
  c.shared = true;
  c.index.resize(plane);
  for (std::size_t i = 0; i < plane; ++i) c.index[i] = static_cast<std::uint32_t>(i);
  return c;
}

// Softmax weights for query q into `out` (size per_query).
void query_weights(const Tensor& key, const Tensor& query, const Candidates& cand,
                   std::size_t q, std::vector<double>& out) {
  const std::size_t channels = query.dim(0);
  const std::size_t qplane = query.dim(1) * query.dim(2);
  const std::size_t kplane = key.dim(1) * key.dim(2);
  const double temperature = std::sqrt(static_cast<double>(channels));
  const auto* idx = cand.of(q);
  out.resize(cand.per_query);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cand.per_query; ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < channels; ++c) s += key[c * kplane + idx[j]] * query[c * qplane + q];
    out[j] = s / temperature;
    mx = std::max(mx, out[j]);
  }
  double sum = 0.0;
  for (auto& v : out) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : out) v /= sum;
}

void check_qkv(const Tensor& value, const Tensor& key, const Tensor& query) {
  require_rank(value, 3, "attention value");
  require_rank(key, 3, "attention key");
  require_rank(query, 3, "attention query");
  require_same_shape(value, key, "attention value/key");
  if (query.dim(0) != key.dim(0)) {
    throw ShapeError("attention: query has " + std::to_string(query.dim(0)) +
                     " channels, key has " + std::to_string(key.dim(0)));
  }
}

Tensor attention_forward(const Tensor& value, const Tensor& key, const Tensor& query,
                         const Candidates& cand) {
  const std::size_t channels = query.dim(0);
  const std::size_t qplane = query.dim(1) * query.dim(2);
  const std::size_t kplane = key.dim(1) * key.dim(2);
  Tensor out(query.shape());
  std::vector<double> wts;
  for (std::size_t q = 0; q < qplane; ++q) {
    query_weights(key, query, cand, q, wts);
    const auto* idx = cand.of(q);
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cand.per_query; ++j) acc += wts[j] * value[c * kplane + idx[j]];
      out[c * qplane + q] = acc;
    }
  }
  return out;
}

void attention_backward(const Tensor& value, const Tensor& key, const Tensor& query,
                        const Candidates& cand, const Tensor& grad_out, Tensor* gv, Tensor* gk,
                        Tensor* gq) {
  const std::size_t channels = query.dim(0);
  const std::size_t qplane = query.dim(1) * query.dim(2);
  const std::size_t kplane = key.dim(1) * key.dim(2);
  const double temperature = std::sqrt(static_cast<double>(channels));
  std::vector<double> wts, dw;
  for (std::size_t q = 0; q < qplane; ++q) {
    query_weights(key, query, cand, q, wts);
    const auto* idx = cand.of(q);
    dw.assign(cand.per_query, 0.0);
    double weighted = 0.0;
    for (std::size_t j = 0; j < cand.per_query; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double g = grad_out[c * qplane + q];
        d += g * value[c * kplane + idx[j]];
        if (gv) (*gv)[c * kplane + idx[j]] += wts[j] * g;
      }
      dw[j] = d;
      weighted += wts[j] * d;
    }
    for (std::size_t j = 0; j < cand.per_query; ++j) {
      const double ds = wts[j] * (dw[j] - weighted) / temperature;
      if (ds == 0.0) continue;
      for (std::size_t c = 0; c < channels; ++c) {
        if (gk) (*gk)[c * kplane + idx[j]] += ds * query[c * qplane + q];
        if (gq) (*gq)[c * qplane + q] += ds * key[c * kplane + idx[j]];
      }
    }
  }
}

ad::Var attention_op(ad::Var value, ad::Var key, ad::Var query,
                     std::shared_ptr<const Candidates> cand) {
  const auto& q = query.value();
  const double scores = static_cast<double>(cand->per_query * q.dim(1) * q.dim(2));
  const double flops = 4.0 * static_cast<double>(q.dim(0)) * scores + 4.0 * scores;
  return query.tape->record(
      {value, key, query},
      [cand](ad::Tape::Inputs in) { return attention_forward(*in[0], *in[1], *in[2], *cand); },
      [cand](ad::Tape::Inputs in, const Tensor&, const Tensor& g, ad::Tape::GradInputs gin) {
        attention_backward(*in[0], *in[1], *in[2], *cand, g, gin[0], gin[1], gin[2]);
      },
      flops);
}

}  // namespace

Tensor local_attention_weights(const Tensor& key, const Tensor& query, std::size_t n) {
  require_same_shape(key, query, "local attention key/query");
  if (n % 2 == 0) throw std::invalid_argument("local attention: n must be odd");
  const std::size_t h = query.dim(1), w = query.dim(2);
  const auto cand = local_candidates(h, w, n);
  Tensor out({n * n, h, w});
  std::vector<double> wts;
  for (std::size_t q = 0; q < h * w; ++q) {
    query_weights(key, query, cand, q, wts);
    for (std::size_t j = 0; j < n * n; ++j) out[j * h * w + q] = wts[j];
  }
  return out;
}

ad::Var local_attention(ad::Var value, ad::Var key, ad::Var query, std::size_t n) {
  check_qkv(value.value(), key.value(), query.value());
  require_same_shape(key.value(), query.value(), "local attention key/query");
  if (n % 2 == 0) throw std::invalid_argument("local attention: n must be odd");
  const auto& q = query.value();
  return attention_op(value, key, query,
                      std::make_shared<const Candidates>(local_candidates(q.dim(1), q.dim(2), n)));
}

Tensor local_attention(const Tensor& value, const Tensor& key, const Tensor& query,
                       std::size_t n) {
  ad::Tape tape;
  return local_attention(tape.leaf(value), tape.leaf(key), tape.leaf(query), n).value();
}

ad::Var global_attention(ad::Var value, ad::Var key, ad::Var query) {
  check_qkv(value.value(), key.value(), query.value());
  const auto& k = key.value();
  return attention_op(value, key, query,
                      std::make_shared<const Candidates>(all_candidates(k.dim(1) * k.dim(2))));
}

// ----------------------------------------------------------------- fusion

FusionVars bind(ad::Tape& tape, const FusionConfig& cfg, const FusionWeights& w, bool train) {
  FusionVars v;
  if (cfg.uses_qkv()) {
    v.value_w = tape.leaf(w.value.weight, train);
    v.value_b = tape.leaf(w.value.bias, train && cfg.qkv_bias);
    v.key_w = tape.leaf(w.key.weight, train);
    v.key_b = tape.leaf(w.key.bias, train && cfg.qkv_bias);
    v.query_w = tape.leaf(w.query.weight, train);
    v.query_b = tape.leaf(w.query.bias, train && cfg.qkv_bias);
  } else if (cfg.variant == Variant::ConvFusion) {
    v.fuse_w = tape.leaf(w.fuse.weight, train);
    v.fuse_b = tape.leaf(w.fuse.bias, train);
  }
  return v;
}

ad::Var fuse(const FusionConfig& cfg, const FusionVars& vars, ad::Var keyframe_features,
             const Tensor& motion, ad::Var lr_features) {
  cfg.validate();
  const auto& fi = keyframe_features.value();
  const auto& fp = lr_features.value();
  require_rank(fi, 3, "keyframe features");
  require_rank(fp, 3, "LR features");
  if (fi.dim(0) != fp.dim(0)) {
    throw ShapeError("fusion: keyframe features have " + std::to_string(fi.dim(0)) +
                     " channels, LR features " + std::to_string(fp.dim(0)));
  }
  const std::size_t channels = fi.dim(0), h = fi.dim(1), w = fi.dim(2);

  if (cfg.variant == Variant::WarpOnly) return warp_features(keyframe_features, motion);
  const ad::Var upsampled = ad::bilinear_resize(lr_features, h, w);
  if (cfg.variant == Variant::NoFusion) return upsampled;

  const ad::Var warped = warp_features(keyframe_features, motion);
  ad::Var attended;
  if (cfg.variant == Variant::ConvFusion) {
    if (vars.fuse_w.tape == nullptr) throw ShapeError("fusion: conv variant has no conv weights");
    if (vars.fuse_w.value().shape() != Shape{channels, 2 * channels, 3, 3}) {
      throw ShapeError("fusion: conv weights " + shape_str(vars.fuse_w.value().shape()) +
                       " do not match C = " + std::to_string(channels));
    }
    attended = ad::conv2d(ad::concat_channels(warped, upsampled), vars.fuse_w, vars.fuse_b,
                          {1, 1, 1});
  } else {
    if (vars.value_w.tape == nullptr) throw ShapeError("fusion: attention variant has no QKV weights");
    const ops::Conv2dParams enc{1, 1, qkv_groups(cfg, channels)};
    const Shape expected{channels, channels / enc.groups, 3, 3};
    for (auto wv : {vars.value_w, vars.key_w, vars.query_w}) {
      if (wv.value().shape() != expected) {
        throw ShapeError("fusion: QKV weights " + shape_str(wv.value().shape()) + " but variant " +
                         variant_name(cfg.variant) + " expects " + shape_str(expected));
      }
    }
    ad::Var value = ad::conv2d(warped, vars.value_w, vars.value_b, enc);
    ad::Var key = ad::conv2d(warped, vars.key_w, vars.key_b, enc);
    const ad::Var query = ad::conv2d(upsampled, vars.query_w, vars.query_b, enc);
    if (cfg.variant == Variant::GlobalAttention) {
      value = ad::avg_pool(value, cfg.global_downsample);
      key = ad::avg_pool(key, cfg.global_downsample);
      attended = global_attention(value, key, query);
    } else {
      attended = local_attention(value, key, query, cfg.neighborhood);
    }
  }
  return cfg.direct_connection ? ad::add(upsampled, attended) : attended;
}

QKV encode_qkv(const Tensor& warped, const Tensor& upsampled, const FusionConfig& cfg,
               const FusionWeights& w) {
  require_same_shape(warped, upsampled, "encode_qkv");
  if (!cfg.uses_qkv()) throw std::invalid_argument("encode_qkv: variant has no QKV encoders");
  const std::size_t channels = warped.dim(0);
  check_weights(cfg, w, channels);
  const ops::Conv2dParams enc{1, 1, qkv_groups(cfg, channels)};
  return {ops::conv2d(warped, w.value.weight, w.value.bias, enc),
          ops::conv2d(warped, w.key.weight, w.key.bias, enc),
          ops::conv2d(upsampled, w.query.weight, w.query.bias, enc)};
}

Tensor creff_forward(const Tensor& keyframe_features, const Tensor& motion,
                     const Tensor& lr_features, const FusionConfig& cfg,
                     const FusionWeights& w) {
  check_weights(cfg, w, keyframe_features.dim(0));
  ad::Tape tape;
  const auto vars = bind(tape, cfg, w, false);
  return fuse(cfg, vars, tape.leaf(keyframe_features), motion, tape.leaf(lr_features)).value();
}

backbone::Cost fusion_cost(const FusionConfig& cfg, std::size_t channels, std::size_t height,
                           std::size_t width, std::size_t lr_height, std::size_t lr_width) {
  using backbone::conv_flops;
  constexpr double kSoftmaxPerScore = 4.0;
  backbone::Cost cost;
  const double plane = static_cast<double>(height * width);
  const double c = static_cast<double>(channels);
  if (cfg.variant == Variant::WarpOnly) return cost;  // a pure gather
  if (lr_height != height || lr_width != width) {
    cost.resize += backbone::resize_flops(channels, height, width);
  }
  if (cfg.variant == Variant::NoFusion) return cost;

  if (cfg.variant == Variant::ConvFusion) {
    cost.conv += conv_flops(2 * channels, channels, 3, 1, height, width);
  } else {
    const std::size_t g = qkv_groups(cfg, channels);
    cost.conv += 3.0 * conv_flops(channels, channels, 3, g, height, width);
    double candidates = 0.0;
    if (cfg.variant == Variant::GlobalAttention) {
      const std::size_t f = cfg.global_downsample;
      const double pooled = static_cast<double>(((height + f - 1) / f) * ((width + f - 1) / f));
      // Pool K and V: one add per input element plus one divide per output.
      cost.pointwise += 2.0 * (c * plane + c * pooled);
      candidates = pooled;
    } else {
      candidates = static_cast<double>(cfg.neighborhood * cfg.neighborhood);
    }
    // K^T Q scores and the weighted sum of V, each a C-long multiply-add per candidate.
    cost.conv += 2.0 * 2.0 * c * candidates * plane;
    cost.pointwise += kSoftmaxPerScore * candidates * plane;
  }
  if (cfg.direct_connection) cost.pointwise += c * plane;
  return cost;
}

}  // namespace arseg::creff
