#pragma once

#include <cstddef>
#include <cstdint>

#include "arseg/tensor.hpp"

// Forward and backward kernels on plain tensors. The differentiable wrappers
// in autograd.hpp are thin shims over these.
namespace arseg::ops {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Output extent of a strided, padded convolution along one axis (floor).
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

/// Grouped cross-correlation. `input` is C_in×H×W, `weights` C_out×(C_in/g)×k×k,
/// `bias` C_out or empty for none.
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const Conv2dParams& p);

/// Accumulates gradients into any non-null destination. Destinations must be
/// pre-sized to the matching forward argument.
void conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                     const Conv2dParams& p, Tensor* grad_input, Tensor* grad_weights,
                     Tensor* grad_bias);

/// Bilinear resampling with half-pixel centers, C×H×W -> C×out_h×out_w.
Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w);
void bilinear_resize_backward(const Tensor& grad_out, Tensor& grad_input);

/// Softmax along `axis` of exp(x / temperature), max-subtracted.
Tensor softmax(const Tensor& input, std::size_t axis, double temperature = 1.0);

struct CrossEntropy {
  double value = 0.0;
  std::size_t counted = 0;
  bool all_ignored = false;
};

/// Mean over non-ignored pixels of -log softmax(logits)[label] for K×H×W logits.
CrossEntropy cross_entropy(const Tensor& logits, const LabelMap& labels,
                           std::int32_t ignore_index);
/// d(mean CE)/d(logits), scaled by `scale` and added into grad_logits.
void cross_entropy_backward(const Tensor& logits, const LabelMap& labels,
                            std::int32_t ignore_index, double scale, Tensor& grad_logits);

double mse(const Tensor& a, const Tensor& b);

/// Mean over pixels of KL(softmax(target) || softmax(pred)), class axis 0.
double kl_divergence(const Tensor& target_logits, const Tensor& pred_logits);
void kl_divergence_backward(const Tensor& target_logits, const Tensor& pred_logits,
                            double scale, Tensor& grad_pred);

/// Average pooling by an integer factor over H and W. Windows at the far edge
/// may be partial; each output averages the pixels it actually covers.
Tensor avg_pool(const Tensor& input, std::size_t factor);
void avg_pool_backward(const Tensor& grad_out, std::size_t factor, Tensor& grad_input);

/// Channel-wise argmax of K×H×W scores (lowest class wins ties).
LabelMap argmax_channels(const Tensor& scores);

}  // namespace arseg::ops
