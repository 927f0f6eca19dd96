#include <random>

#include "arseg/backbone.hpp"
#include "arseg/errors.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace arseg;
using namespace arseg::backbone;
using testing::random_tensor;

namespace {

BackboneArch toy_arch() {
  BackboneArch a;
  a.in_channels = 1;
  a.feat = {{8, 3, 1}, {12, 3, 2}, {12, 3, 1}};
  a.task = {{10, 3, 1}, {6, 3, 1}};
  a.feature_channels = 6;
  a.num_classes = 3;
  return a;
}

Branch make_branch(double scale, std::uint64_t seed) {
  Branch b;
  b.arch = toy_arch();
  b.scale = scale;
  b.weights = init_weights(b.arch, seed);
  return b;
}

}  // namespace

TEST_CASE("feature shapes follow the branch scale") {
  std::mt19937_64 rng(1);
  const Tensor frame = random_tensor({1, 32, 48}, rng);
  CHECK(forward_features(make_branch(1.0, 1), frame).shape() == Shape{6, 32, 48});
  CHECK(forward_features(make_branch(0.5, 1), frame).shape() == Shape{6, 16, 24});
  CHECK(scaled_size(0.5, 32, 48) == std::pair<std::size_t, std::size_t>{16, 24});
  CHECK_THROWS_AS(scaled_size(0.2, 32, 48), ShapeError);
  CHECK_THROWS_AS(scaled_size(0.0, 32, 48), ShapeError);
  CHECK_THROWS_AS(forward_features(make_branch(0.2, 1), frame), ShapeError);
}

TEST_CASE("zero-weight network gives zero features") {
  std::mt19937_64 rng(2);
  Branch b = make_branch(1.0, 2);
  for (auto* stack : {&b.weights.feat, &b.weights.task}) {
    for (auto& c : *stack) {
      c.weight = Tensor(c.weight.shape());
      c.bias = Tensor(c.bias.shape());
    }
  }
  const Tensor f = forward_features(b, random_tensor({1, 16, 16}, rng));
  for (double v : f.data()) CHECK(v == 0.0);
}

TEST_CASE("final conv") {
  std::mt19937_64 rng(3);
  Branch b = make_branch(1.0, 3);
  const Tensor feats = random_tensor({6, 5, 7}, rng);

  SUBCASE("identity weights copy the features") {
    BackboneArch a = b.arch;
    a.num_classes = 6;
    Branch id{a, 1.0, init_weights(a, 3)};
    Tensor w({6, 6, 1, 1});
    for (std::size_t i = 0; i < 6; ++i) w[i * 6 + i] = 1.0;
    id.weights.final_conv->weight = w;
    id.weights.final_conv->bias = Tensor({6});
    CHECK(forward_logits(id, feats) == feats);
  }
  SUBCASE("per-pixel matrix-vector oracle") {
    const Tensor logits = forward_logits(b, feats);
    const auto& fc = *b.weights.final_conv;
    double worst = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t y = 0; y < 5; ++y) {
        for (std::size_t x = 0; x < 7; ++x) {
          double s = fc.bias[k];
          for (std::size_t c = 0; c < 6; ++c) s += fc.weight[k * 6 + c] * feats.at(c, y, x);
          worst = std::max(worst, std::abs(s - logits.at(k, y, x)));
        }
      }
    }
    CHECK(worst <= 1e-12);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(forward_logits(b, random_tensor({5, 4, 4}, rng)), ShapeError);
  }
}

TEST_CASE("analytic FLOP counts") {
  SUBCASE("single 3x3 conv, 1->1 channel, 8x8 output") {
    CHECK(conv_flops(1, 1, 3, 1, 8, 8) == 1152.0);
  }
  SUBCASE("grouped conv with g = C costs 1/C of the dense count") {
    CHECK(conv_flops(16, 16, 3, 16, 10, 12) * 16 == conv_flops(16, 16, 3, 1, 10, 12));
  }
  SUBCASE("half scale quarters the conv count") {
    const auto a = toy_arch();
    CHECK(feature_cost(a, 0.5, 32, 48).conv == 0.25 * feature_cost(a, 1.0, 32, 48).conv);
  }
  SUBCASE("tape audit matches the cost model") {
    std::mt19937_64 rng(4);
    for (double scale : {1.0, 0.5}) {
      const Branch b = make_branch(scale, 4);
      ad::Tape tape;
      const auto vars = bind(tape, b.weights, false, false);
      const ad::Var frame = tape.leaf(random_tensor({1, 32, 48}, rng));
      const ad::Var f = features(b.arch, scale, vars, frame);
      CHECK(tape.flops() == doctest::Approx(feature_cost(b.arch, scale, 32, 48).total()));
      ad::Var full = f;
      if (scale != 1.0) full = ad::bilinear_resize(f, 32, 48);
      logits(b.arch, vars, full);
      CHECK(tape.flops() == doctest::Approx(flops_of(b.arch, scale, 32, 48).total()));
    }
  }
}

TEST_CASE("checkpoints") {
  const Branch b = make_branch(1.0, 5);
  SUBCASE("round trip with and without the final conv") {
    const auto bytes = encode_checkpoint(flatten(b.weights, true));
    const auto tensors = decode_checkpoint(bytes);
    CHECK(tensors.size() == tensor_count(b.arch, true));
    const auto back = unflatten(b.arch, tensors, nullptr);
    CHECK(encode_checkpoint(flatten(back, true)) == bytes);

    const auto body = decode_checkpoint(encode_checkpoint(flatten(b.weights, false)));
    CHECK(body.size() == tensor_count(b.arch, false));
    const auto shared = unflatten(b.arch, body, b.weights.final_conv);
    CHECK(shared.final_conv == b.weights.final_conv);
  }
  SUBCASE("corrupt bytes") {
    auto bytes = encode_checkpoint(flatten(b.weights, true));
    auto bad = bytes;
    bad[1] = 'Z';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("tensor count or shape mismatch") {
    auto tensors = flatten(b.weights, true);
    tensors.pop_back();
    CHECK_THROWS(unflatten(b.arch, tensors, nullptr));
    tensors = flatten(b.weights, true);
    tensors[0] = Tensor({1, 1, 1, 1});
    CHECK_THROWS(unflatten(b.arch, tensors, nullptr));
  }
}

TEST_CASE("architecture validation") {
  BackboneArch a = toy_arch();
  a.feature_channels = 7;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a = toy_arch();
  a.feat[0].kernel = 2;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
}
