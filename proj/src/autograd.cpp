#include "arseg/autograd.hpp"

#include <memory>
#include <stdexcept>
#include <string>

#include "arseg/errors.hpp"

namespace arseg::ad {

const Tensor& Var::value() const { return tape->value(*this); }
const Tensor& Var::grad() const { return tape->grad(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::vector<Var> inputs, Forward forward, Backward backward, double flops) {
  flops_ += flops;
  Node n;
  n.is_leaf = false;
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (const auto& v : inputs) {
    if (v.tape != this) throw std::logic_error("tape: input recorded on a different tape");
    n.inputs.push_back(v.id);
    in.push_back(&nodes_[v.id].value);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.value = forward(in);
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(Var v) const {
  auto& n = nodes_[v.id];
  if (n.grad.empty()) {
    // Lazily materialized zero gradient for values backward never reached.
    const_cast<Node&>(n).grad = Tensor(n.value.shape());
  }
  return n.grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor{};
}

void Tape::backward(Var output) {
  if (nodes_[output.id].value.size() != 1) {
    throw ShapeError("backward: output must be a single element, got " +
                     shape_str(nodes_[output.id].value.shape()));
  }
  zero_grad();
  nodes_[output.id].grad = Tensor(nodes_[output.id].value.shape(), 1.0);
  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;
    in.clear();
    gin.clear();
    for (auto src : n.inputs) {
      Node& s = nodes_[src];
      in.push_back(&s.value);
      if (s.requires_grad) {
        if (s.grad.empty()) s.grad = Tensor(s.value.shape());
        gin.push_back(&s.grad);
      } else {
        gin.push_back(nullptr);
      }
    }
    n.backward(in, n.value, n.grad, gin);
  }
}

void Tape::set_leaf(Var v, Tensor value) {
  Node& n = nodes_[v.id];
  if (!n.is_leaf) throw std::logic_error("tape: set_leaf on a recorded node");
  require_same_shape(n.value, value, "tape set_leaf");
  n.value = std::move(value);
}

void Tape::replay() {
  std::vector<const Tensor*> in;
  for (auto& n : nodes_) {
    if (n.is_leaf) continue;
    in.clear();
    for (auto src : n.inputs) in.push_back(&nodes_[src].value);
    n.value = n.forward(in);
  }
}

namespace {

Tensor scalar(double v) { return Tensor({1}, v); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape->record(
      {a, b},
      [](Tape::Inputs in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*in[1])[i];
        return out;
      },
      [](Tape::Inputs, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        for (auto* dst : gin) {
          if (!dst) continue;
          for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
        }
      },
      static_cast<double>(a.value().size()));
}

Var scale(Var a, double s) {
  return a.tape->record(
      {a},
      [s](Tape::Inputs in) {
        Tensor out = *in[0];
        for (auto& v : out.data()) v *= s;
        return out;
      },
      [s](Tape::Inputs, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s * g[i];
      },
      static_cast<double>(a.value().size()));
}

Var relu(Var a) {
  return a.tape->record(
      {a},
      [](Tape::Inputs in) {
        Tensor out = *in[0];
        for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
        return out;
      },
      [](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        const Tensor& x = *in[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > 0.0) (*gin[0])[i] += g[i];
        }
      },
      static_cast<double>(a.value().size()));
}

Var conv2d(Var input, Var weights, std::optional<Var> bias, const ops::Conv2dParams& p) {
  const auto& x = input.value();
  const auto& w = weights.value();
  double flops = 0.0;
  if (x.rank() == 3 && w.rank() == 4 && p.stride > 0 && x.dim(1) + 2 * p.padding >= w.dim(2) &&
      x.dim(2) + 2 * p.padding >= w.dim(3)) {
    flops = 2.0 * static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3) * w.dim(0)) *
            static_cast<double>(ops::conv_out_extent(x.dim(1), w.dim(2), p.stride, p.padding) *
                                ops::conv_out_extent(x.dim(2), w.dim(3), p.stride, p.padding));
  }
  std::vector<Var> args{input, weights};
  if (bias) args.push_back(*bias);
  return input.tape->record(
      std::move(args),
      [p](Tape::Inputs in) {
        return ops::conv2d(*in[0], *in[1], in.size() > 2 ? *in[2] : Tensor{}, p);
      },
      [p](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        ops::conv2d_backward(*in[0], *in[1], g, p, gin[0], gin[1],
                             gin.size() > 2 ? gin[2] : nullptr);
      },
      flops);
}

Var bilinear_resize(Var input, std::size_t out_h, std::size_t out_w) {
  const auto& x = input.value();
  const bool identity = x.rank() == 3 && x.dim(1) == out_h && x.dim(2) == out_w;
  const double flops =
      identity || x.rank() != 3 ? 0.0 : 8.0 * static_cast<double>(x.dim(0) * out_h * out_w);
  return input.tape->record(
      {input}, [=](Tape::Inputs in) { return ops::bilinear_resize(*in[0], out_h, out_w); },
      [](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        if (in[0]->shape() == g.shape()) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
          return;
        }
        ops::bilinear_resize_backward(g, *gin[0]);
      },
      flops);
}

Var concat_channels(Var a, Var b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[1] || sa[2] != sb[2]) {
    throw ShapeError("concat_channels: spatial extents differ, " + shape_str(sa) + " vs " +
                     shape_str(sb));
  }
  return a.tape->record(
      {a, b},
      [](Tape::Inputs in) {
        const auto& x = *in[0];
        const auto& y = *in[1];
        std::vector<double> data(x.vec());
        data.insert(data.end(), y.vec().begin(), y.vec().end());
        return Tensor({x.dim(0) + y.dim(0), x.dim(1), x.dim(2)}, std::move(data));
      },
      [](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        const std::size_t na = in[0]->size();
        if (gin[0]) {
          for (std::size_t i = 0; i < na; ++i) (*gin[0])[i] += g[i];
        }
        if (gin[1]) {
          for (std::size_t i = 0; i < in[1]->size(); ++i) (*gin[1])[i] += g[na + i];
        }
      });
}

Var avg_pool(Var input, std::size_t factor) {
  const auto& x = input.value();
  double flops = 0.0;
  if (x.rank() == 3 && factor > 0) {
    const std::size_t pooled = ((x.dim(1) + factor - 1) / factor) * ((x.dim(2) + factor - 1) / factor);
    flops = static_cast<double>(x.size() + x.dim(0) * pooled);
  }
  return input.tape->record(
      {input}, [factor](Tape::Inputs in) { return ops::avg_pool(*in[0], factor); },
      [factor](Tape::Inputs, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        ops::avg_pool_backward(g, factor, *gin[0]);
      },
      flops);
}

Var sum_squares(Var a) {
  return a.tape->record(
      {a},
      [](Tape::Inputs in) {
        double s = 0.0;
        for (double v : in[0]->data()) s += v * v;
        return scalar(s);
      },
      [](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        for (std::size_t i = 0; i < in[0]->size(); ++i) (*gin[0])[i] += 2.0 * (*in[0])[i] * g[0];
      });
}

Var mse(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mse");
  return a.tape->record(
      {a, b}, [](Tape::Inputs in) { return scalar(ops::mse(*in[0], *in[1])); },
      [](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        const double k = 2.0 * g[0] / static_cast<double>(in[0]->size());
        for (std::size_t i = 0; i < in[0]->size(); ++i) {
          const double d = (*in[0])[i] - (*in[1])[i];
          if (gin[0]) (*gin[0])[i] += k * d;
          if (gin[1]) (*gin[1])[i] -= k * d;
        }
      });
}

Var cross_entropy(Var logits, const LabelMap& labels, std::int32_t ignore_index,
                  bool* all_ignored) {
  auto shared = std::make_shared<const LabelMap>(labels);
  if (all_ignored) *all_ignored = ops::cross_entropy(logits.value(), labels, ignore_index).all_ignored;
  return logits.tape->record(
      {logits},
      [shared, ignore_index](Tape::Inputs in) {
        return scalar(ops::cross_entropy(*in[0], *shared, ignore_index).value);
      },
      [shared, ignore_index](Tape::Inputs in, const Tensor&, const Tensor& g,
                             Tape::GradInputs gin) {
        ops::cross_entropy_backward(*in[0], *shared, ignore_index, g[0], *gin[0]);
      });
}

Var kl_divergence(Var target_logits, Var pred_logits) {
  require_same_shape(target_logits.value(), pred_logits.value(), "kl_divergence");
  return pred_logits.tape->record(
      {target_logits, pred_logits},
      [](Tape::Inputs in) { return scalar(ops::kl_divergence(*in[0], *in[1])); },
      [](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        if (gin[1]) ops::kl_divergence_backward(*in[0], *in[1], g[0], *gin[1]);
      });
}

Var gather_plane(Var input, std::vector<std::size_t> index, std::size_t out_h,
                 std::size_t out_w) {
  const auto& x = input.value();
  require_rank(x, 3, "gather_plane input");
  if (index.size() != out_h * out_w) {
    throw ShapeError("gather_plane: index covers " + std::to_string(index.size()) +
                     " pixels, output plane has " + std::to_string(out_h * out_w));
  }
  const std::size_t plane = x.dim(1) * x.dim(2);
  for (auto i : index) {
    if (i >= plane) throw ShapeError("gather_plane: index out of range");
  }
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return input.tape->record(
      {input},
      [idx, out_h, out_w](Tape::Inputs in) {
        const auto& src = *in[0];
        const std::size_t c = src.dim(0), sp = src.dim(1) * src.dim(2), op = out_h * out_w;
        Tensor out({c, out_h, out_w});
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < op; ++i) out[ch * op + i] = src[ch * sp + (*idx)[i]];
        }
        return out;
      },
      [idx](Tape::Inputs in, const Tensor&, const Tensor& g, Tape::GradInputs gin) {
        const auto& src = *in[0];
        const std::size_t c = src.dim(0), sp = src.dim(1) * src.dim(2), op = idx->size();
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < op; ++i) (*gin[0])[ch * sp + (*idx)[i]] += g[ch * op + i];
        }
      });
}

}  // namespace arseg::ad
