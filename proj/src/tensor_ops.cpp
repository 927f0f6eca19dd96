#include "arseg/tensor_ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "arseg/errors.hpp"

namespace arseg::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, h_out, w_out, cin_g, cout_g;
};

ConvGeometry check_conv(const Tensor& input, const Tensor& weights, const Tensor& bias,
                        const Conv2dParams& p) {
  require_rank(input, 3, "conv2d input");
  require_rank(weights, 4, "conv2d weights");
  if (p.groups == 0) throw ShapeError("conv2d: groups must be positive");
  if (p.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.c_in = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.c_out = weights.dim(0);
  g.k = weights.dim(2);
  if (weights.dim(3) != g.k) {
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weights.shape()));
  }
  if (g.k % 2 == 0) {
    throw ShapeError("conv2d: kernel side must be odd, got " + std::to_string(g.k));
  }
  if (g.c_in % p.groups != 0) {
    throw ShapeError("conv2d: input channels " + std::to_string(g.c_in) +
                     " not divisible by groups " + std::to_string(p.groups));
  }
  if (g.c_out % p.groups != 0) {
    throw ShapeError("conv2d: output channels " + std::to_string(g.c_out) +
                     " not divisible by groups " + std::to_string(p.groups));
  }
  g.cin_g = g.c_in / p.groups;
  g.cout_g = g.c_out / p.groups;
  if (weights.dim(1) != g.cin_g) {
    throw ShapeError("conv2d: weight dim 1 is " + std::to_string(weights.dim(1)) +
                     ", expected input channels per group " + std::to_string(g.cin_g));
  }
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                     " does not match output channels " + std::to_string(g.c_out));
  }
  if (g.h + 2 * p.padding < g.k || g.w + 2 * p.padding < g.k) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " exceeds padded input " +
                     shape_str(input.shape()));
  }
  g.h_out = conv_out_extent(g.h, g.k, p.stride, p.padding);
  g.w_out = conv_out_extent(g.w, g.k, p.stride, p.padding);
  return g;
}

// Column buffer for one group: rows = cin_g*k*k, cols = h_out*w_out.
void im2col(const Tensor& input, const ConvGeometry& g, const Conv2dParams& p,
            std::size_t group, RowMat& col) {
  col.resize(static_cast<Eigen::Index>(g.cin_g * g.k * g.k),
             static_cast<Eigen::Index>(g.h_out * g.w_out));
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  const auto in = input.data();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
    const double* plane = in.data() + (group * g.cin_g + ci) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
        double* dst = col.data() + row * g.h_out * g.w_out;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          double* drow = dst + oy * g.w_out;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(drow, drow + g.w_out, 0.0);
            continue;
          }
          const double* srow = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w))
                           ? 0.0
                           : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im_add(const RowMat& col, const ConvGeometry& g, const Conv2dParams& p,
                std::size_t group, Tensor& grad_input) {
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  auto out = grad_input.data();
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
    double* plane = out.data() + (group * g.cin_g + ci) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
        const double* src = col.data() + row * g.h_out * g.w_out;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* drow = plane + static_cast<std::size_t>(iy) * g.w;
          const double* srow = src + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) {
              drow[static_cast<std::size_t>(ix)] += srow[ox];
            }
          }
        }
      }
    }
  }
}

struct Sample {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel-center source coordinate, clamped to the valid range.
Sample source_coord(std::size_t dst, std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(src));
  const std::size_t i1 = std::min(i0 + 1, in - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const Conv2dParams& p) {
  const auto g = check_conv(input, weights, bias, p);
  Tensor out({g.c_out, g.h_out, g.w_out});
  const auto plane = static_cast<Eigen::Index>(g.h_out * g.w_out);
  const auto patch = static_cast<Eigen::Index>(g.cin_g * g.k * g.k);
  RowMat col;
  for (std::size_t grp = 0; grp < p.groups; ++grp) {
    im2col(input, g, p, grp, col);
    ConstMapMat w(weights.data().data() + grp * g.cout_g * patch,
                  static_cast<Eigen::Index>(g.cout_g), patch);
    MapMat y(out.data().data() + grp * g.cout_g * plane, static_cast<Eigen::Index>(g.cout_g),
             plane);
    y.noalias() = w * col;
  }
  if (!bias.empty()) {
    auto o = out.data();
    for (std::size_t c = 0; c < g.c_out; ++c) {
      const double b = bias[c];
      for (Eigen::Index i = 0; i < plane; ++i) o[c * plane + i] += b;
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                     const Conv2dParams& p, Tensor* grad_input, Tensor* grad_weights,
                     Tensor* grad_bias) {
  const auto g = check_conv(input, weights, Tensor{}, p);
  const Shape expected{g.c_out, g.h_out, g.w_out};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d backward: output gradient " + shape_str(grad_out.shape()) +
                     " vs expected " + shape_str(expected));
  }
  const auto plane = static_cast<Eigen::Index>(g.h_out * g.w_out);
  const auto patch = static_cast<Eigen::Index>(g.cin_g * g.k * g.k);
  if (grad_bias) {
    for (std::size_t c = 0; c < g.c_out; ++c) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < plane; ++i) s += grad_out[c * plane + i];
      (*grad_bias)[c] += s;
    }
  }
  if (!grad_input && !grad_weights) return;
  RowMat col;
  RowMat dcol;
  for (std::size_t grp = 0; grp < p.groups; ++grp) {
    ConstMapMat gy(grad_out.data().data() + grp * g.cout_g * plane,
                   static_cast<Eigen::Index>(g.cout_g), plane);
    if (grad_weights) {
      im2col(input, g, p, grp, col);
      MapMat gw(grad_weights->data().data() + grp * g.cout_g * patch,
                static_cast<Eigen::Index>(g.cout_g), patch);
      gw.noalias() += gy * col.transpose();
    }
    if (grad_input) {
      ConstMapMat w(weights.data().data() + grp * g.cout_g * patch,
                    static_cast<Eigen::Index>(g.cout_g), patch);
      dcol.noalias() = w.transpose() * gy;
      col2im_add(dcol, g, p, grp, *grad_input);
    }
  }
}

Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 3, "bilinear_resize input");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: target size must be >= 1");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h == out_h && w == out_w) return input;
  Tensor out({c, out_h, out_w});
  std::vector<Sample> ys(out_h), xs(out_w);
  for (std::size_t y = 0; y < out_h; ++y) ys[y] = source_coord(y, h, out_h);
  for (std::size_t x = 0; x < out_w; ++x) xs[x] = source_coord(x, w, out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& sy = ys[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& sx = xs[x];
        const double top = input.at(ch, sy.i0, sx.i0) * (1.0 - sx.frac) +
                           input.at(ch, sy.i0, sx.i1) * sx.frac;
        const double bot = input.at(ch, sy.i1, sx.i0) * (1.0 - sx.frac) +
                           input.at(ch, sy.i1, sx.i1) * sx.frac;
        out.at(ch, y, x) = top * (1.0 - sy.frac) + bot * sy.frac;
      }
    }
  }
  return out;
}

void bilinear_resize_backward(const Tensor& grad_out, Tensor& grad_input) {
  const std::size_t c = grad_out.dim(0), out_h = grad_out.dim(1), out_w = grad_out.dim(2);
  const std::size_t h = grad_input.dim(1), w = grad_input.dim(2);
  if (grad_input.dim(0) != c) throw ShapeError("bilinear_resize backward: channel mismatch");
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto sy = source_coord(y, h, out_h);
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto sx = source_coord(x, w, out_w);
        const double g = grad_out.at(ch, y, x);
        grad_input.at(ch, sy.i0, sx.i0) += g * (1.0 - sy.frac) * (1.0 - sx.frac);
        grad_input.at(ch, sy.i0, sx.i1) += g * (1.0 - sy.frac) * sx.frac;
        grad_input.at(ch, sy.i1, sx.i0) += g * sy.frac * (1.0 - sx.frac);
        grad_input.at(ch, sy.i1, sx.i1) += g * sy.frac * sx.frac;
      }
    }
  }
}

Tensor softmax(const Tensor& input, std::size_t axis, double temperature) {
  if (axis >= input.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(input.shape()));
  }
  const auto& s = input.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, input[base + j * inner] / temperature);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(input[base + j * inner] / temperature - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  }
  return out;
}

namespace {

void check_ce(const Tensor& logits, const LabelMap& labels, std::int32_t ignore_index) {
  require_rank(logits, 3, "cross_entropy logits");
  if (labels.height != logits.dim(1) || labels.width != logits.dim(2)) {
    throw ShapeError("cross_entropy: labels " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " vs logits " +
                     shape_str(logits.shape()));
  }
  const auto k = static_cast<std::int32_t>(logits.dim(0));
  for (auto l : labels.labels) {
    if (l != ignore_index && (l < 0 || l >= k)) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(l) +
                                  " outside [0, " + std::to_string(k) + ")");
    }
  }
}

// log-sum-exp over the class axis at pixel i.
double pixel_lse(const Tensor& logits, std::size_t k, std::size_t plane, std::size_t i) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits[c * plane + i]);
  double s = 0.0;
  for (std::size_t c = 0; c < k; ++c) s += std::exp(logits[c * plane + i] - mx);
  return mx + std::log(s);
}

}  // namespace

CrossEntropy cross_entropy(const Tensor& logits, const LabelMap& labels,
                           std::int32_t ignore_index) {
  check_ce(logits, labels, ignore_index);
  const std::size_t k = logits.dim(0), plane = labels.size();
  CrossEntropy r;
  double total = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    const auto l = labels.labels[i];
    if (l == ignore_index) continue;
    total += pixel_lse(logits, k, plane, i) - logits[static_cast<std::size_t>(l) * plane + i];
    ++r.counted;
  }
  if (r.counted == 0) {
    r.all_ignored = true;
    return r;
  }
  r.value = total / static_cast<double>(r.counted);
  return r;
}

void cross_entropy_backward(const Tensor& logits, const LabelMap& labels,
                            std::int32_t ignore_index, double scale, Tensor& grad_logits) {
  check_ce(logits, labels, ignore_index);
  const std::size_t k = logits.dim(0), plane = labels.size();
  std::size_t counted = 0;
  for (auto l : labels.labels) counted += (l != ignore_index);
  if (counted == 0) return;
  const double norm = scale / static_cast<double>(counted);
  for (std::size_t i = 0; i < plane; ++i) {
    const auto l = labels.labels[i];
    if (l == ignore_index) continue;
    const double lse = pixel_lse(logits, k, plane, i);
    for (std::size_t c = 0; c < k; ++c) {
      const double prob = std::exp(logits[c * plane + i] - lse);
      grad_logits[c * plane + i] +=
          norm * (prob - (static_cast<std::size_t>(l) == c ? 1.0 : 0.0));
    }
  }
}

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double kl_divergence(const Tensor& target_logits, const Tensor& pred_logits) {
  require_same_shape(target_logits, pred_logits, "kl_divergence");
  require_rank(pred_logits, 3, "kl_divergence logits");
  const std::size_t k = pred_logits.dim(0), plane = pred_logits.dim(1) * pred_logits.dim(2);
  double total = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    const double lt = pixel_lse(target_logits, k, plane, i);
    const double lp = pixel_lse(pred_logits, k, plane, i);
    for (std::size_t c = 0; c < k; ++c) {
      const double log_t = target_logits[c * plane + i] - lt;
      const double log_p = pred_logits[c * plane + i] - lp;
      total += std::exp(log_t) * (log_t - log_p);
    }
  }
  return total / static_cast<double>(plane);
}

void kl_divergence_backward(const Tensor& target_logits, const Tensor& pred_logits,
                            double scale, Tensor& grad_pred) {
  const std::size_t k = pred_logits.dim(0), plane = pred_logits.dim(1) * pred_logits.dim(2);
  const double norm = scale / static_cast<double>(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const double lt = pixel_lse(target_logits, k, plane, i);
    const double lp = pixel_lse(pred_logits, k, plane, i);
    for (std::size_t c = 0; c < k; ++c) {
      const double pt = std::exp(target_logits[c * plane + i] - lt);
      const double pp = std::exp(pred_logits[c * plane + i] - lp);
      grad_pred[c * plane + i] += norm * (pp - pt);
    }
  }
}

Tensor avg_pool(const Tensor& input, std::size_t factor) {
  require_rank(input, 3, "avg_pool input");
  if (factor == 0) throw ShapeError("avg_pool: factor must be positive");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = (h + factor - 1) / factor, ow = (w + factor - 1) / factor;
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y1 = std::min(h, (oy + 1) * factor);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x1 = std::min(w, (ox + 1) * factor);
        double s = 0.0;
        for (std::size_t y = oy * factor; y < y1; ++y) {
          for (std::size_t x = ox * factor; x < x1; ++x) s += input.at(ch, y, x);
        }
        out.at(ch, oy, ox) = s / static_cast<double>((y1 - oy * factor) * (x1 - ox * factor));
      }
    }
  }
  return out;
}

void avg_pool_backward(const Tensor& grad_out, std::size_t factor, Tensor& grad_input) {
  const std::size_t c = grad_input.dim(0), h = grad_input.dim(1), w = grad_input.dim(2);
  const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y1 = std::min(h, (oy + 1) * factor);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x1 = std::min(w, (ox + 1) * factor);
        const double g = grad_out.at(ch, oy, ox) /
                         static_cast<double>((y1 - oy * factor) * (x1 - ox * factor));
        for (std::size_t y = oy * factor; y < y1; ++y) {
          for (std::size_t x = ox * factor; x < x1; ++x) grad_input.at(ch, y, x) += g;
        }
      }
    }
  }
}

LabelMap argmax_channels(const Tensor& scores) {
  require_rank(scores, 3, "argmax input");
  const std::size_t k = scores.dim(0), h = scores.dim(1), w = scores.dim(2);
  LabelMap out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (scores[c * h * w + i] > scores[best * h * w + i]) best = c;
    }
    out.labels[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace arseg::ops
