#include <cmath>
#include <random>

#include "arseg/codec.hpp"
#include "arseg/creff.hpp"
#include "arseg/errors.hpp"
#include "arseg/grad_check.hpp"
#include "arseg/tensor_ops.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace arseg;
using namespace arseg::creff;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

FusionConfig config(Variant v, std::size_t n = 3, bool dc = true) {
  FusionConfig c;
  c.variant = v;
  c.neighborhood = n;
  c.direct_connection = dc;
  return c;
}

Tensor block_motion(std::size_t by, std::size_t bx, std::size_t block, int range,
                    std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(-range, range);
  codec::MotionField f{block, by, bx, {}};
  for (std::size_t i = 0; i < by * bx; ++i) f.vectors.push_back({u(rng), u(rng)});
  return codec::expand_mv(f, by * block, bx * block);
}

// Shifts content right by s columns: out(.., x) = in(.., clamp(x - s)).
Tensor shift_x(const Tensor& in, long s) {
  const long w = static_cast<long>(in.dim(2));
  Tensor out(in.shape());
  for (std::size_t c = 0; c < in.dim(0); ++c) {
    for (std::size_t y = 0; y < in.dim(1); ++y) {
      for (long x = 0; x < w; ++x) out.at(c, y, x) = in.at(c, y, std::clamp(x - s, 0L, w - 1));
    }
  }
  return out;
}

// a * x + b * y, elementwise.
Tensor lin(double a, const Tensor& x, double b, const Tensor& y) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

}  // namespace

TEST_CASE("warp_features") {
  std::mt19937_64 rng(1);
  Tensor ramp({1, 4, 4});
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) ramp.at(0, y, x) = 4.0 * y + x;
  }

  SUBCASE("zero motion is the identity") {
    const Tensor f = random_tensor({3, 8, 8}, rng);
    CHECK(warp_features(f, Tensor({2, 8, 8})) == f);
  }
  SUBCASE("uniform (+1, 0) shifts each row with a clamped right edge") {
    Tensor m({2, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) m[i] = 1.0;
    const Tensor out = warp_features(ramp, m);
    for (std::size_t y = 0; y < 4; ++y) {
      const double base = 4.0 * y;
      CHECK(out.at(0, y, 0) == base + 1);
      CHECK(out.at(0, y, 1) == base + 2);
      CHECK(out.at(0, y, 2) == base + 3);
      CHECK(out.at(0, y, 3) == base + 3);
    }
  }
  SUBCASE("every pixel sent to the origin gives a constant map") {
    Tensor m({2, 4, 4});
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) {
        m.at(0, y, x) = -static_cast<double>(x);
        m.at(1, y, x) = -static_cast<double>(y);
      }
    }
    const Tensor out = warp_features(ramp, m);
    for (double v : out.data()) CHECK(v == ramp.at(0, 0, 0));
  }
  SUBCASE("linear in the features for fixed motion") {
    const Tensor a = random_tensor({2, 8, 8}, rng), b = random_tensor({2, 8, 8}, rng);
    const Tensor m = block_motion(2, 2, 4, 3, rng);
    const Tensor lhs = warp_features(lin(2.0, a, 1.0, b), m);
    const Tensor rhs = lin(2.0, warp_features(a, m), 1.0, warp_features(b, m));
    CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
  }
  SUBCASE("errors") {
    Tensor frac({2, 4, 4});
    frac[0] = 0.5;
    CHECK_THROWS_AS(warp_features(ramp, frac), std::invalid_argument);
    CHECK_THROWS_AS(warp_features(ramp, Tensor({2, 4, 5})), ShapeError);
  }
}

TEST_CASE("QKV encoders") {
  std::mt19937_64 rng(2);
  const Tensor warped = random_tensor({4, 6, 7}, rng);
  const Tensor up = random_tensor({4, 6, 7}, rng);
  const FusionConfig la = config(Variant::LocalAttention);

  SUBCASE("identity kernels pass their inputs through") {
    const QKV qkv = encode_qkv(warped, up, la, identity_fusion(la, 4));
    CHECK(qkv.value == warped);
    CHECK(qkv.key == warped);
    CHECK(qkv.query == up);
  }
  SUBCASE("grouped encoders never mix channels") {
    const FusionWeights w = init_fusion(config(Variant::LocalAttention, 3, false), 4, 9);
    const QKV a = encode_qkv(warped, up, la, w);
    Tensor poked = warped;
    for (std::size_t y = 0; y < 6; ++y) {
      for (std::size_t x = 0; x < 7; ++x) poked.at(0, y, x) += 1.0;
    }
    const QKV b = encode_qkv(poked, up, la, w);
    for (std::size_t c = 1; c < 4; ++c) {
      for (std::size_t y = 0; y < 6; ++y) {
        for (std::size_t x = 0; x < 7; ++x) {
          CHECK(a.value.at(c, y, x) == b.value.at(c, y, x));
          CHECK(a.key.at(c, y, x) == b.key.at(c, y, x));
        }
      }
    }
  }
  SUBCASE("random weights match a per-channel convolution oracle") {
    FusionWeights w = init_fusion(la, 4, 3);
    w.value.bias = random_tensor({4}, rng);
    const QKV qkv = encode_qkv(warped, up, la, w);
    CHECK(max_abs_diff(qkv.value, testing::conv_oracle(warped, w.value.weight, w.value.bias, 1, 1, 4)) <= 1e-12);
    CHECK(max_abs_diff(qkv.key, testing::conv_oracle(warped, w.key.weight, w.key.bias, 1, 1, 4)) <= 1e-12);
    CHECK(max_abs_diff(qkv.query, testing::conv_oracle(up, w.query.weight, w.query.bias, 1, 1, 4)) <= 1e-12);
  }
  SUBCASE("dense variant uses full kernels") {
    const FusionConfig dense = config(Variant::LocalAttentionDense);
    const FusionWeights w = init_fusion(dense, 4, 4);
    CHECK(w.value.weight.shape() == Shape{4, 4, 3, 3});
    const QKV qkv = encode_qkv(warped, up, dense, w);
    CHECK(max_abs_diff(qkv.query, testing::conv_oracle(up, w.query.weight, w.query.bias, 1, 1, 1)) <= 1e-12);
  }
  SUBCASE("channel mismatch with weights") {
    CHECK_THROWS_AS(encode_qkv(random_tensor({3, 6, 7}, rng), random_tensor({3, 6, 7}, rng), la,
                               identity_fusion(la, 4)),
                    ShapeError);
  }
}

TEST_CASE("local attention") {
  std::mt19937_64 rng(3);

  SUBCASE("matches the brute-force oracle on a random 2x6x6 instance") {
    const Tensor v = random_tensor({2, 6, 6}, rng), k = random_tensor({2, 6, 6}, rng),
                 q = random_tensor({2, 6, 6}, rng);
    CHECK(max_abs_diff(local_attention(v, k, q, 3), testing::local_attention_oracle(v, k, q, 3)) <= 1e-10);
    CHECK(max_abs_diff(local_attention(v, k, q, 5), testing::local_attention_oracle(v, k, q, 5)) <= 1e-10);
  }
  SUBCASE("constant keys give uniform weights and the neighbourhood mean") {
    const std::size_t n = 3;
    const Tensor v = random_tensor({2, 5, 5}, rng);
    const Tensor k = Tensor::full({2, 5, 5}, 0.7);
    const Tensor q = random_tensor({2, 5, 5}, rng);
    const Tensor wts = local_attention_weights(k, q, n);
    CHECK(wts.shape() == Shape{9, 5, 5});
    for (double x : wts.data()) CHECK(x == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    const Tensor a = local_attention(v, k, q, n);
    for (std::size_t c = 0; c < 2; ++c) {
      for (long y = 0; y < 5; ++y) {
        for (long x = 0; x < 5; ++x) {
          double mean = 0.0;
          for (long dy = -1; dy <= 1; ++dy) {
            for (long dx = -1; dx <= 1; ++dx) {
              mean += v.at(c, std::clamp(y + dy, 0L, 4L), std::clamp(x + dx, 0L, 4L)) / 9.0;
            }
          }
          CHECK(a.at(c, y, x) == doctest::Approx(mean).epsilon(1e-12));
        }
      }
    }
  }
  SUBCASE("C=4, scores (2, 0) over two distinct candidates give (0.8808, 0.1192)") {
    // Two key/value positions seen by one query: global attention over a 1x2 map.
    ad::Tape tape;
    Tensor k({4, 1, 2}), v({4, 1, 2}), q = Tensor::full({4, 1, 1}, 1.0);
    for (std::size_t c = 0; c < 4; ++c) {
      k.at(c, 0, 0) = 1.0;  // K.Q / sqrt(4) = 2
      v.at(c, 0, 0) = 1.0;
    }
    const Tensor a = global_attention(tape.leaf(v), tape.leaf(k), tape.leaf(q)).value();
    CHECK(a[0] == doctest::Approx(0.8808).epsilon(1e-3));

    // Same scores inside a 3x3 window: one candidate at 2, the rest at 0.
    Tensor kk({4, 3, 3}), qq = Tensor::full({4, 3, 3}, 1.0);
    for (std::size_t c = 0; c < 4; ++c) kk.at(c, 0, 0) = 1.0;
    const Tensor wts = local_attention_weights(kk, qq, 3);
    const double e2 = std::exp(2.0);
    CHECK(wts.at(0, 1, 1) == doctest::Approx(e2 / (e2 + 8.0)).epsilon(1e-12));
    CHECK(wts.at(1, 1, 1) == doctest::Approx(1.0 / (e2 + 8.0)).epsilon(1e-12));
  }
  SUBCASE("weights are a convex combination and outputs stay in the hull") {
    const Tensor v = random_tensor({3, 7, 8}, rng), k = random_tensor({3, 7, 8}, rng, 3.0),
                 q = random_tensor({3, 7, 8}, rng, 3.0);
    const std::size_t n = 5;
    const Tensor wts = local_attention_weights(k, q, n);
    for (std::size_t y = 0; y < 7; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        double s = 0.0;
        for (std::size_t i = 0; i < n * n; ++i) {
          CHECK(wts.at(i, y, x) >= 0.0);
          s += wts.at(i, y, x);
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
    }
    const Tensor a = local_attention(v, k, q, n);
    for (std::size_t c = 0; c < 3; ++c) {
      for (long y = 0; y < 7; ++y) {
        for (long x = 0; x < 8; ++x) {
          double lo = 1e300, hi = -1e300;
          for (long dy = -2; dy <= 2; ++dy) {
            for (long dx = -2; dx <= 2; ++dx) {
              const double val = v.at(c, std::clamp(y + dy, 0L, 6L), std::clamp(x + dx, 0L, 7L));
              lo = std::min(lo, val);
              hi = std::max(hi, val);
            }
          }
          CHECK(a.at(c, y, x) >= lo - 1e-10);
          CHECK(a.at(c, y, x) <= hi + 1e-10);
        }
      }
    }
  }
  SUBCASE("even n is rejected") {
    const Tensor t = random_tensor({1, 4, 4}, rng);
    CHECK_THROWS_AS(local_attention(t, t, t, 2), std::invalid_argument);
  }
}

TEST_CASE("creff_forward") {
  std::mt19937_64 rng(4);
  const std::size_t c = 4;
  const Tensor fi = random_tensor({c, 16, 32}, rng);
  const Tensor fp = random_tensor({c, 8, 16}, rng);
  const Tensor mv = block_motion(4, 8, 4, 2, rng);
  const Tensor up = ops::bilinear_resize(fp, 16, 32);

  SUBCASE("zero value encoder with a direct connection returns the upsampled LR map") {
    const FusionConfig la = config(Variant::LocalAttention);
    FusionWeights w = init_fusion(la, c, 1);
    w.value.weight = Tensor(w.value.weight.shape());
    w.value.bias = Tensor(w.value.bias.shape());
    CHECK(creff_forward(fi, mv, fp, la, w) == up);
  }
  SUBCASE("static clip, identity encoders, n = 1 gives upsample + F_I") {
    const FusionConfig la1 = config(Variant::LocalAttention, 1);
    const Tensor out = creff_forward(fi, Tensor({2, 16, 32}), fp, la1, identity_fusion(la1, c));
    CHECK(max_abs_diff(out, lin(1.0, up, 1.0, fi)) <= 1e-12);
  }
  SUBCASE("without a direct connection only the attended map remains") {
    const FusionConfig la1 = config(Variant::LocalAttention, 1, false);
    const Tensor out = creff_forward(fi, mv, fp, la1, identity_fusion(la1, c));
    CHECK(max_abs_diff(out, warp_features(fi, mv)) <= 1e-12);
  }
  SUBCASE("warp-only and no-fusion variants") {
    const FusionConfig wo = config(Variant::WarpOnly), nf = config(Variant::NoFusion);
    CHECK(creff_forward(fi, mv, fp, wo, {}) == warp_features(fi, mv));
    CHECK(creff_forward(fi, mv, fp, nf, {}) == up);
  }
  SUBCASE("conv fusion with zero kernel and a direct connection") {
    const FusionConfig cf = config(Variant::ConvFusion);
    CHECK(creff_forward(fi, mv, fp, cf, identity_fusion(cf, c)) == up);
  }
  SUBCASE("translating all inputs by one block translates the interior output") {
    for (Variant v : {Variant::LocalAttention, Variant::LocalAttentionDense, Variant::ConvFusion,
                      Variant::WarpOnly}) {
      const FusionConfig cfg = config(v);
      const FusionWeights w = init_fusion(cfg, c, 5);
      const Tensor a = creff_forward(fi, mv, fp, cfg, w);
      const Tensor b = creff_forward(shift_x(fi, 4), shift_x(mv, 4), shift_x(fp, 2), cfg, w);
      double worst = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < 16; ++y) {
          for (std::size_t x = 12; x < 24; ++x) {
            worst = std::max(worst, std::abs(b.at(ch, y, x) - a.at(ch, y, x - 4)));
          }
        }
      }
      CHECK(worst <= 1e-12);
    }
  }
  SUBCASE("variant and weight mismatch") {
    const FusionConfig la = config(Variant::LocalAttention);
    const FusionConfig cf = config(Variant::ConvFusion);
    const FusionConfig dense = config(Variant::LocalAttentionDense);
    CHECK_THROWS_AS(creff_forward(fi, mv, fp, cf, init_fusion(la, c, 1)), ShapeError);
    CHECK_THROWS_AS(creff_forward(fi, mv, fp, la, init_fusion(cf, c, 1)), ShapeError);
    CHECK_THROWS_AS(creff_forward(fi, mv, fp, dense, init_fusion(la, c, 1)), ShapeError);
    CHECK_THROWS_AS(creff_forward(fi, mv, random_tensor({3, 8, 16}, rng), la, init_fusion(la, c, 1)),
                    ShapeError);
  }
  SUBCASE("fusion checkpoints") {
    const FusionConfig la = config(Variant::LocalAttention);
    const FusionWeights w = init_fusion(la, c, 6);
    const auto flat = flatten(la, w);
    CHECK(flat.size() == tensor_count(la));
    CHECK(creff_forward(fi, mv, fp, la, unflatten(la, c, flat)) == creff_forward(fi, mv, fp, la, w));
    CHECK_THROWS_AS(unflatten(config(Variant::ConvFusion), c, flat), FormatError);
  }
  SUBCASE("variant names") {
    for (Variant v : {Variant::LocalAttention, Variant::LocalAttentionDense,
                      Variant::GlobalAttention, Variant::ConvFusion, Variant::WarpOnly,
                      Variant::NoFusion}) {
      CHECK(parse_variant(variant_name(v)) == v);
    }
    CHECK_THROWS_AS(parse_variant("bogus"), std::invalid_argument);
  }
}

TEST_CASE("fusion gradients pass grad_check") {
  std::mt19937_64 rng(5);
  const std::size_t c = 2;
  const Tensor mv = block_motion(2, 2, 4, 1, rng);
  const Tensor target = random_tensor({c, 8, 8}, rng);
  for (Variant v : {Variant::LocalAttention, Variant::LocalAttentionDense,
                    Variant::GlobalAttention, Variant::ConvFusion}) {
    FusionConfig cfg = config(v);
    cfg.global_downsample = 4;
    const FusionWeights w = init_fusion(cfg, c, 7);
    const auto flat = flatten(cfg, w);
    std::vector<Tensor> inputs{random_tensor({c, 8, 8}, rng), random_tensor({c, 4, 4}, rng)};
    for (const auto& t : flat) inputs.push_back(t);
    auto f = [&](ad::Tape& tape, std::span<const ad::Var> in) {
      FusionVars vars;
      if (cfg.uses_qkv()) {
        vars = {in[2], in[3], in[4], in[5], in[6], in[7], {}, {}};
      } else {
        vars.fuse_w = in[2];
        vars.fuse_b = in[3];
      }
      return ad::mse(fuse(cfg, vars, in[0], mv, in[1]), tape.leaf(target));
    };
    CAPTURE(variant_name(v));
    CHECK(ad::grad_check(f, inputs, 1e-3).max_relative_error <= 1e-4);
  }
}

TEST_CASE("fusion cost ordering at camera resolution") {
  // C = 128 at 720x960 from an LR map of 360x480, keys pooled by 32 for global attention.
  auto cost = [](FusionConfig cfg) { return fusion_cost(cfg, 128, 720, 960, 360, 480).total(); };
  FusionConfig ga = config(Variant::GlobalAttention);
  ga.global_downsample = 32;
  const double dense = cost(config(Variant::LocalAttentionDense, 7));
  const double conv = cost(config(Variant::ConvFusion));
  const double global = cost(ga);
  const double la11 = cost(config(Variant::LocalAttention, 11));
  const double la7 = cost(config(Variant::LocalAttention, 7));
  const double la3 = cost(config(Variant::LocalAttention, 3));
  CHECK(dense > conv);
  CHECK(conv > global);
  CHECK(global > la11);
  CHECK(la11 > la7);
  CHECK(la7 > la3);
  CHECK(cost(config(Variant::WarpOnly)) == 0.0);
  CHECK(cost(config(Variant::LocalAttention, 7, false)) < la7);
}

TEST_CASE("tape FLOPs of a fusion match the cost model") {
  std::mt19937_64 rng(6);
  const std::size_t c = 4;
  const Tensor mv = block_motion(4, 4, 4, 2, rng);
  for (Variant v : {Variant::LocalAttention, Variant::LocalAttentionDense,
                    Variant::GlobalAttention, Variant::ConvFusion, Variant::NoFusion,
                    Variant::WarpOnly}) {
    FusionConfig cfg = config(v);
    cfg.global_downsample = 4;
    ad::Tape tape;
    const auto vars = bind(tape, cfg, init_fusion(cfg, c, 1), false);
    const ad::Var fi = tape.leaf(random_tensor({c, 16, 16}, rng));
    const ad::Var fp = tape.leaf(random_tensor({c, 8, 8}, rng));
    fuse(cfg, vars, fi, mv, fp);
    CAPTURE(variant_name(v));
    CHECK(tape.flops() == doctest::Approx(fusion_cost(cfg, c, 16, 16, 8, 8).total()));
  }
}
