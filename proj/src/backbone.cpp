#include "arseg/backbone.hpp"

#include <cmath>
#include <random>
#include <string>

#include "arseg/binary_io.hpp"
#include "arseg/errors.hpp"

namespace arseg::backbone {

void BackboneArch::validate() const {
  if (in_channels == 0) throw std::invalid_argument("backbone: in_channels must be positive");
  if (feat.empty()) throw std::invalid_argument("backbone: feature sub-network is empty");
  if (task.empty()) throw std::invalid_argument("backbone: task sub-network is empty");
  if (num_classes == 0) throw std::invalid_argument("backbone: num_classes must be positive");
  for (const auto* stack : {&feat, &task}) {
    for (const auto& l : *stack) {
      if (l.out_channels == 0 || l.stride == 0 || l.kernel % 2 == 0) {
        throw std::invalid_argument("backbone: layers need positive width/stride and odd kernel");
      }
    }
  }
  if (task.back().out_channels != feature_channels) {
    throw std::invalid_argument("backbone: last task layer emits " +
                                std::to_string(task.back().out_channels) +
                                " channels, feature_channels is " +
                                std::to_string(feature_channels));
  }
}

namespace {

ConvWeights make_conv(std::size_t c_in, std::size_t c_out, std::size_t k, double stddev,
                      std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  ConvWeights w{Tensor({c_out, c_in, k, k}), Tensor({c_out})};
  for (auto& v : w.weight.data()) v = dist(rng);
  return w;
}

}  // namespace

BackboneWeights init_weights(const BackboneArch& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  BackboneWeights w;
  std::size_t c = arch.in_channels;
  for (const auto& l : arch.feat) {
    w.feat.push_back(make_conv(c, l.out_channels, l.kernel,
                               std::sqrt(2.0 / static_cast<double>(c * l.kernel * l.kernel)), rng));
    c = l.out_channels;
  }
  for (const auto& l : arch.task) {
    w.task.push_back(make_conv(c, l.out_channels, l.kernel,
                               std::sqrt(2.0 / static_cast<double>(c * l.kernel * l.kernel)), rng));
    c = l.out_channels;
  }
  w.final_conv = std::make_shared<ConvWeights>(
      make_conv(c, arch.num_classes, 1, std::sqrt(1.0 / static_cast<double>(c)), rng));
  return w;
}

std::pair<std::size_t, std::size_t> scaled_size(double scale, std::size_t height,
                                                std::size_t width) {
  if (!(scale > 0.0 && scale <= 1.0)) {
    throw ShapeError("branch scale must lie in (0, 1], got " + std::to_string(scale));
  }
  const auto h = static_cast<std::size_t>(std::lround(scale * static_cast<double>(height)));
  const auto w = static_cast<std::size_t>(std::lround(scale * static_cast<double>(width)));
  if (h < 8 || w < 8) {
    throw ShapeError("scale " + std::to_string(scale) + " maps " + std::to_string(height) + "x" +
                     std::to_string(width) + " to " + std::to_string(h) + "x" +
                     std::to_string(w) + ", below the 8-pixel minimum");
  }
  return {h, w};
}

BackboneVars bind(ad::Tape& tape, const BackboneWeights& w, bool train_body, bool train_final) {
  BackboneVars v;
  for (const auto& c : w.feat) {
    v.feat.push_back({tape.leaf(c.weight, train_body), tape.leaf(c.bias, train_body)});
  }
  for (const auto& c : w.task) {
    v.task.push_back({tape.leaf(c.weight, train_body), tape.leaf(c.bias, train_body)});
  }
  v.final_conv = {tape.leaf(w.final_conv->weight, train_final),
                  tape.leaf(w.final_conv->bias, train_final)};
  return v;
}

ad::Var features(const BackboneArch& arch, double scale, const BackboneVars& vars,
                 ad::Var frame) {
  const auto& f = frame.value();
  require_rank(f, 3, "backbone frame");
  if (f.dim(0) != arch.in_channels) {
    throw ShapeError("backbone: frame has " + std::to_string(f.dim(0)) +
                     " channels, architecture expects " + std::to_string(arch.in_channels));
  }
  const auto [h, w] = scaled_size(scale, f.dim(1), f.dim(2));
  ad::Var x = ad::bilinear_resize(frame, h, w);
  for (std::size_t i = 0; i < arch.feat.size(); ++i) {
    const auto& l = arch.feat[i];
    x = ad::relu(ad::conv2d(x, vars.feat[i].weight, vars.feat[i].bias,
                            {l.stride, l.kernel / 2, 1}));
  }
  for (std::size_t i = 0; i < arch.task.size(); ++i) {
    const auto& l = arch.task[i];
    x = ad::relu(ad::conv2d(x, vars.task[i].weight, vars.task[i].bias,
                            {l.stride, l.kernel / 2, 1}));
  }
  return ad::bilinear_resize(x, h, w);
}

ad::Var logits(const BackboneArch& arch, const BackboneVars& vars, ad::Var feats) {
  const auto& f = feats.value();
  require_rank(f, 3, "final conv input");
  if (f.dim(0) != arch.feature_channels) {
    throw ShapeError("final conv: features have " + std::to_string(f.dim(0)) +
                     " channels, expected C = " + std::to_string(arch.feature_channels));
  }
  return ad::conv2d(feats, vars.final_conv.weight, vars.final_conv.bias, {1, 0, 1});
}

Tensor forward_features(const Branch& branch, const Tensor& frame) {
  ad::Tape tape;
  const auto vars = bind(tape, branch.weights, false, false);
  return features(branch.arch, branch.scale, vars, tape.leaf(frame)).value();
}

Tensor forward_logits(const Branch& branch, const Tensor& feats) {
  require_rank(feats, 3, "final conv input");
  if (feats.dim(0) != branch.arch.feature_channels) {
    throw ShapeError("final conv: features have " + std::to_string(feats.dim(0)) +
                     " channels, expected C = " + std::to_string(branch.arch.feature_channels));
  }
  const auto& fc = *branch.weights.final_conv;
  return ops::conv2d(feats, fc.weight, fc.bias, {1, 0, 1});
}

double conv_flops(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t groups,
                  std::size_t h_out, std::size_t w_out) {
  return 2.0 * static_cast<double>(kernel * kernel) * static_cast<double>(c_in / groups) *
         static_cast<double>(c_out) * static_cast<double>(h_out * w_out);
}

double resize_flops(std::size_t channels, std::size_t h_out, std::size_t w_out) {
  return 8.0 * static_cast<double>(channels * h_out * w_out);
}

Cost feature_cost(const BackboneArch& arch, double scale, std::size_t height, std::size_t width) {
  arch.validate();
  const auto [h0, w0] = scaled_size(scale, height, width);
  Cost cost;
  if (h0 != height || w0 != width) cost.resize += resize_flops(arch.in_channels, h0, w0);
  std::size_t c = arch.in_channels, h = h0, w = w0;
  for (const auto* stack : {&arch.feat, &arch.task}) {
    for (const auto& l : *stack) {
      const std::size_t ho = ops::conv_out_extent(h, l.kernel, l.stride, l.kernel / 2);
      const std::size_t wo = ops::conv_out_extent(w, l.kernel, l.stride, l.kernel / 2);
      cost.conv += conv_flops(c, l.out_channels, l.kernel, 1, ho, wo);
      cost.pointwise += static_cast<double>(l.out_channels * ho * wo);
      c = l.out_channels;
      h = ho;
      w = wo;
    }
  }
  if (h != h0 || w != w0) cost.resize += resize_flops(c, h0, w0);
  return cost;
}

Cost final_conv_cost(const BackboneArch& arch, std::size_t height, std::size_t width) {
  Cost cost;
  cost.conv = conv_flops(arch.feature_channels, arch.num_classes, 1, 1, height, width);
  return cost;
}

Cost flops_of(const BackboneArch& arch, double scale, std::size_t height, std::size_t width) {
  Cost cost = feature_cost(arch, scale, height, width);
  const auto [h, w] = scaled_size(scale, height, width);
  if (h != height || w != width) cost.resize += resize_flops(arch.feature_channels, height, width);
  cost += final_conv_cost(arch, height, width);
  return cost;
}

std::vector<std::uint8_t> encode_checkpoint(const std::vector<Tensor>& tensors) {
  io::ByteWriter w;
  w.magic("ARWT");
  w.u8(1);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    w.f64s(t.data());
  }
  return w.take();
}

std::vector<Tensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("ARWT", "checkpoint header");
  const std::size_t version_at = r.offset();
  if (const auto v = r.u8("checkpoint version"); v != 1) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  const auto count = r.u32("layer count");
  std::vector<Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto rank = r.u8("tensor rank");
    if (rank == 0 || rank > 4) throw FormatError("checkpoint tensor rank out of range", at);
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.u32("tensor extent");
      if (e == 0) throw FormatError("zero extent in checkpoint", r.offset() - 4);
    }
    std::vector<double> data(shape_numel(shape));
    r.f64s(data, "tensor payload");
    out.emplace_back(std::move(shape), std::move(data));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return out;
}

std::vector<Tensor> flatten(const BackboneWeights& w, bool with_final) {
  std::vector<Tensor> out;
  for (const auto* stack : {&w.feat, &w.task}) {
    for (const auto& c : *stack) {
      out.push_back(c.weight);
      out.push_back(c.bias);
    }
  }
  if (with_final) {
    out.push_back(w.final_conv->weight);
    out.push_back(w.final_conv->bias);
  }
  return out;
}

std::size_t tensor_count(const BackboneArch& arch, bool with_final) {
  return 2 * (arch.feat.size() + arch.task.size()) + (with_final ? 2 : 0);
}

BackboneWeights unflatten(const BackboneArch& arch, std::span<const Tensor> tensors,
                          std::shared_ptr<ConvWeights> shared_final) {
  arch.validate();
  const bool with_final = !shared_final;
  if (tensors.size() != tensor_count(arch, with_final)) {
    throw FormatError("checkpoint holds " + std::to_string(tensors.size()) +
                      " tensors, architecture needs " +
                      std::to_string(tensor_count(arch, with_final)));
  }
  const BackboneWeights reference = init_weights(arch, 0);
  const auto expected = flatten(reference, with_final);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].shape() != expected[i].shape()) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " has shape " +
                        shape_str(tensors[i].shape()) + ", expected " +
                        shape_str(expected[i].shape()));
    }
  }
  BackboneWeights w;
  std::size_t i = 0;
  for (std::size_t l = 0; l < arch.feat.size(); ++l, i += 2) {
    w.feat.push_back({tensors[i], tensors[i + 1]});
  }
  for (std::size_t l = 0; l < arch.task.size(); ++l, i += 2) {
    w.task.push_back({tensors[i], tensors[i + 1]});
  }
  w.final_conv = with_final ? std::make_shared<ConvWeights>(ConvWeights{tensors[i], tensors[i + 1]})
                            : std::move(shared_final);
  return w;
}

}  // namespace arseg::backbone
