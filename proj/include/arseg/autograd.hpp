#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "arseg/tensor.hpp"
#include "arseg/tensor_ops.hpp"

namespace arseg::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

/// Reverse-mode tape. Records primitive applications in execution order so a
/// scalar output can be differentiated with respect to every leaf, and so the
/// whole computation can be replayed after leaves change.
///
/// A tape has a single owner and is not thread-safe.
class Tape {
 public:
  using Inputs = std::span<const Tensor* const>;
  using GradInputs = std::span<Tensor* const>;
  using Forward = std::function<Tensor(Inputs)>;
  // grad_inputs[i] is null when input i does not need a gradient.
  using Backward = std::function<void(Inputs inputs, const Tensor& output,
                                      const Tensor& grad_output, GradInputs grad_inputs)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  /// `flops` is the analytic operation count charged to this application.
  Var record(std::vector<Var> inputs, Forward forward, Backward backward, double flops = 0.0);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Seeds d(output)/d(output) = 1 on a single-element tensor and propagates.
  void backward(Var output);
  void zero_grad();

  /// Replaces a leaf's value (same shape) without re-recording.
  void set_leaf(Var v, Tensor value);
  /// Recomputes every recorded node from the current leaf values.
  void replay();

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Sum of the FLOPs charged by every recorded forward application.
  double flops() const noexcept { return flops_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Forward forward;
    Backward backward;
    bool requires_grad = false;
    bool is_leaf = true;
  };

  std::deque<Node> nodes_;  // stable addresses: value() references survive growth
  double flops_ = 0.0;
};

// Differentiable primitives. Scalars are rank-1 tensors with one element.
Var add(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
Var conv2d(Var input, Var weights, std::optional<Var> bias, const ops::Conv2dParams& p);
Var bilinear_resize(Var input, std::size_t out_h, std::size_t out_w);
Var concat_channels(Var a, Var b);
Var avg_pool(Var input, std::size_t factor);
Var sum_squares(Var a);
Var mse(Var a, Var b);
/// Mean cross entropy; sets *all_ignored when every pixel carries ignore_index.
Var cross_entropy(Var logits, const LabelMap& labels, std::int32_t ignore_index,
                  bool* all_ignored = nullptr);
/// KL(softmax(target) || softmax(pred)) per pixel, averaged. `target` receives no gradient.
Var kl_divergence(Var target_logits, Var pred_logits);
/// out[c, i] = in[c, index[i]] for every channel; index covers the output plane.
Var gather_plane(Var input, std::vector<std::size_t> index, std::size_t out_h,
                 std::size_t out_w);

}  // namespace arseg::ad
