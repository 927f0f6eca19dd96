#include <cmath>
#include <limits>
#include <random>

#include "arseg/errors.hpp"
#include "arseg/grad_check.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace arseg;
using testing::random_tensor;

namespace {

// Contracts any tensor to a scalar with fixed random weights so every output
// element contributes a distinct gradient.
struct Probe {
  Tensor weights;
  ad::Var operator()(ad::Tape& tape, ad::Var v) const {
    return ad::sum_squares(ad::add(v, tape.leaf(weights)));
  }
};

Probe probe(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {random_tensor(s, rng)};
}

double check(const ad::ScalarFn& f, const std::vector<Tensor>& inputs) {
  return ad::grad_check(f, inputs, 1e-3).max_relative_error;
}

}  // namespace

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(1);
  SUBCASE("sum of squares") {
    const auto r = ad::grad_check(
        [](ad::Tape&, std::span<const ad::Var> in) { return ad::sum_squares(in[0]); },
        {random_tensor({3, 4}, rng)}, 1e-3);
    CHECK(r.max_relative_error < 1e-7);
  }
  SUBCASE("constant function") {
    const auto r = ad::grad_check(
        [](ad::Tape& t, std::span<const ad::Var>) { return t.leaf(Tensor::full({1}, 2.0)); },
        {random_tensor({2, 2}, rng)}, 1e-3);
    CHECK(r.max_relative_error == 0.0);
    CHECK(r.analytic == 0.0);
    CHECK(r.numeric == 0.0);
  }
  SUBCASE("eps outside [1e-6, 1e-2]") {
    auto f = [](ad::Tape&, std::span<const ad::Var> in) { return ad::sum_squares(in[0]); };
    CHECK_THROWS_AS(ad::grad_check(f, {Tensor({2})}, 1e-7), std::invalid_argument);
    CHECK_THROWS_AS(ad::grad_check(f, {Tensor({2})}, 0.1), std::invalid_argument);
  }
  SUBCASE("non-finite forward value") {
    auto f = [](ad::Tape&, std::span<const ad::Var> in) { return ad::sum_squares(in[0]); };
    CHECK_THROWS_AS(
        ad::grad_check(f, {Tensor({1}, {std::numeric_limits<double>::infinity()})}, 1e-3),
        NumericalError);
  }
}

TEST_CASE("every primitive passes grad_check at eps = 1e-3") {
  std::mt19937_64 rng(2);
  const Probe p3 = probe({3, 5, 6}, 10);

  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) { return p3(t, ad::add(in[0], in[1])); },
              {random_tensor({3, 5, 6}, rng), random_tensor({3, 5, 6}, rng)}) <= 1e-4);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) { return p3(t, ad::scale(in[0], -1.3)); },
              {random_tensor({3, 5, 6}, rng)}) <= 1e-4);
  // Keep values away from the kink so central differences stay on one side.
  Tensor away = random_tensor({3, 5, 6}, rng);
  for (auto& v : away.data()) v += (v >= 0 ? 0.05 : -0.05);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) { return p3(t, ad::relu(in[0])); },
              {away}) <= 1e-4);

  const Probe pc = probe({4, 5, 6}, 11);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) {
          return pc(t, ad::conv2d(in[0], in[1], in[2], {1, 1, 1}));
        },
              {random_tensor({3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng),
               random_tensor({4}, rng)}) <= 1e-4);
  const Probe ps = probe({4, 3, 3}, 12);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) {
          return ps(t, ad::conv2d(in[0], in[1], in[2], {2, 1, 2}));
        },
              {random_tensor({4, 5, 6}, rng), random_tensor({4, 2, 3, 3}, rng),
               random_tensor({4}, rng)}) <= 1e-4);
  const Probe pr = probe({3, 7, 4}, 13);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) {
          return pr(t, ad::bilinear_resize(in[0], 7, 4));
        },
              {random_tensor({3, 3, 5}, rng)}) <= 1e-4);
  const Probe pcat = probe({5, 4, 4}, 14);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) {
          return pcat(t, ad::concat_channels(in[0], in[1]));
        },
              {random_tensor({2, 4, 4}, rng), random_tensor({3, 4, 4}, rng)}) <= 1e-4);
  const Probe pp = probe({2, 2, 3}, 15);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) { return pp(t, ad::avg_pool(in[0], 3)); },
              {random_tensor({2, 5, 7}, rng)}) <= 1e-4);
  CHECK(check([](ad::Tape&, std::span<const ad::Var> in) { return ad::mse(in[0], in[1]); },
              {random_tensor({2, 3, 3}, rng), random_tensor({2, 3, 3}, rng)}) <= 1e-4);
  const LabelMap labels = testing::random_labels(4, 5, 3, rng);
  CHECK(check([&](ad::Tape&, std::span<const ad::Var> in) {
          return ad::cross_entropy(in[0], labels, 255);
        },
              {random_tensor({3, 4, 5}, rng)}) <= 1e-4);
  const Tensor target = random_tensor({3, 4, 5}, rng);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) {
          return ad::kl_divergence(t.leaf(target), in[0]);
        },
              {random_tensor({3, 4, 5}, rng)}) <= 1e-4);
  const Probe pg = probe({3, 2, 2}, 16);
  CHECK(check([&](ad::Tape& t, std::span<const ad::Var> in) {
          return pg(t, ad::gather_plane(in[0], {0, 5, 5, 7}, 2, 2));
        },
              {random_tensor({3, 3, 3}, rng)}) <= 1e-4);
}

TEST_CASE("tape replay reproduces the forward value bit-identically") {
  std::mt19937_64 rng(3);
  ad::Tape tape;
  const ad::Var x = tape.leaf(random_tensor({2, 6, 6}, rng), true);
  const ad::Var w = tape.leaf(random_tensor({3, 2, 3, 3}, rng), true);
  const ad::Var y = ad::relu(ad::conv2d(x, w, std::nullopt, {1, 1, 1}));
  const ad::Var out = ad::sum_squares(ad::bilinear_resize(y, 9, 9));
  const Tensor first = out.value();
  tape.replay();
  CHECK(out.value() == first);

  // Changing a leaf and replaying matches a fresh recording.
  const Tensor x2 = random_tensor({2, 6, 6}, rng);
  tape.set_leaf(x, x2);
  tape.replay();
  ad::Tape fresh;
  const ad::Var o2 = ad::sum_squares(ad::bilinear_resize(
      ad::relu(ad::conv2d(fresh.leaf(x2), fresh.leaf(w.value()), std::nullopt, {1, 1, 1})), 9, 9));
  CHECK(out.value() == o2.value());
}

TEST_CASE("backward only fills gradients that are requested") {
  ad::Tape tape;
  const ad::Var a = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  const ad::Var b = tape.leaf(Tensor({2}, {3.0, -1.0}), false);
  const ad::Var s = ad::sum_squares(ad::add(a, b));
  tape.backward(s);
  CHECK(a.grad()[0] == doctest::Approx(8.0));
  CHECK(a.grad()[1] == doctest::Approx(2.0));
  CHECK_FALSE(tape.requires_grad(b));
  // A second backward pass starts from zero rather than accumulating.
  tape.backward(s);
  CHECK(a.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("tape charges analytic FLOPs per recorded op") {
  ad::Tape tape;
  const ad::Var x = tape.leaf(Tensor({2, 4, 4}));
  const ad::Var w = tape.leaf(Tensor({3, 2, 3, 3}));
  ad::conv2d(x, w, std::nullopt, {1, 1, 1});
  CHECK(tape.flops() == 2.0 * 9 * 2 * 3 * 16);
  ad::relu(x);
  CHECK(tape.flops() == 2.0 * 9 * 2 * 3 * 16 + 32);
}
