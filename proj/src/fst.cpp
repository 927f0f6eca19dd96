#include "arseg/fst.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "arseg/errors.hpp"
#include "arseg/tensor_ops.hpp"

namespace arseg::fst {

using backbone::Branch;

ArModel make_ar_model(const Branch& hr, double lr_scale, const creff::FusionConfig& fusion,
                      std::uint64_t seed) {
  ArModel m;
  m.hr = hr;
  m.lr.arch = hr.arch;
  m.lr.scale = lr_scale;
  m.lr.weights.feat = hr.weights.feat;
  m.lr.weights.task = hr.weights.task;
  m.lr.weights.final_conv = hr.weights.final_conv;
  m.fusion = fusion;
  m.fusion_weights = creff::init_fusion(fusion, hr.arch.feature_channels, seed);
  return m;
}

LossVars fst_loss(ad::Var seg_logits, const LabelMap& labels, ad::Var fused,
                  ad::Var hr_features, std::int32_t ignore_index) {
  require_same_shape(fused.value(), hr_features.value(), "fst_loss features");
  const ad::Var ce = ad::cross_entropy(seg_logits, labels, ignore_index);
  const ad::Var fs = ad::mse(fused, hr_features);
  return {ad::add(ce, fs), ce, fs};
}

LossParts fst_loss(const Tensor& seg_logits, const LabelMap& labels, const Tensor& fused,
                   const Tensor& hr_features, std::int32_t ignore_index) {
  ad::Tape tape;
  const auto l = fst_loss(tape.leaf(seg_logits), labels, tape.leaf(fused),
                          tape.leaf(hr_features), ignore_index);
  return {l.total.value()[0], l.ce.value()[0], l.feature.value()[0]};
}

ad::Var full_res_logits(const Branch& branch, const backbone::BackboneVars& vars, ad::Var frame) {
  const auto& f = frame.value();
  ad::Var feats = backbone::features(branch.arch, branch.scale, vars, frame);
  feats = ad::bilinear_resize(feats, f.dim(1), f.dim(2));
  return backbone::logits(branch.arch, vars, feats);
}

namespace {

struct Param {
  Tensor* target;
  ad::Var var;
};

class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(std::span<const Param> params) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.target->shape());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& g = params[i].var.grad();
      Tensor& v = velocity_[i];
      Tensor& w = *params[i].target;
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        w[k] -= lr_ * v[k];
      }
    }
  }

 private:
  double lr_, momentum_;
  std::vector<Tensor> velocity_;
};

void collect(backbone::BackboneWeights& w, const backbone::BackboneVars& v, bool with_final,
             std::vector<Param>& out) {
  for (std::size_t i = 0; i < w.feat.size(); ++i) {
    out.push_back({&w.feat[i].weight, v.feat[i].weight});
    out.push_back({&w.feat[i].bias, v.feat[i].bias});
  }
  for (std::size_t i = 0; i < w.task.size(); ++i) {
    out.push_back({&w.task[i].weight, v.task[i].weight});
    out.push_back({&w.task[i].bias, v.task[i].bias});
  }
  if (with_final) {
    out.push_back({&w.final_conv->weight, v.final_conv.weight});
    out.push_back({&w.final_conv->bias, v.final_conv.bias});
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void check_finite(const LossRecord& r) {
  if (!std::isfinite(r.ce)) {
    throw NumericalError("non-finite loss at step " + std::to_string(r.step) +
                         " in the cross-entropy term");
  }
  if (!std::isfinite(r.feature)) {
    throw NumericalError("non-finite loss at step " + std::to_string(r.step) +
                         " in the feature-similarity term");
  }
}

void check_options(const TrainOptions& opt) {
  if (!(opt.learning_rate >= 0.0) || !(opt.momentum >= 0.0 && opt.momentum < 1.0)) {
    throw std::invalid_argument("training: need learning rate >= 0 and momentum in [0, 1)");
  }
}

}  // namespace

std::vector<LossRecord> train_hr_branch(Branch& branch, std::span<const LabeledFrame> data,
                                        const TrainOptions& opt) {
  check_options(opt);
  std::vector<LossRecord> history;
  SgdMomentum sgd(opt.learning_rate, opt.momentum);
  std::mt19937_64 rng(opt.seed);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (const auto idx : epoch_order(data.size(), opt.shuffle, rng)) {
      const auto& sample = data[idx];
      ad::Tape tape;
      const auto vars = backbone::bind(tape, branch.weights, true, true);
      const ad::Var logits = full_res_logits(branch, vars, tape.leaf(sample.frame));
      const ad::Var loss = ad::cross_entropy(logits, sample.labels, opt.ignore_index);
      LossRecord rec{history.size(), loss.value()[0], loss.value()[0], 0.0};
      check_finite(rec);
      tape.backward(loss);
      std::vector<Param> params;
      collect(branch.weights, vars, true, params);
      sgd.step(params);
      history.push_back(rec);
    }
  }
  return history;
}

std::vector<LossRecord> train_lr_branch(ArModel& model, std::span<const TrainPair> data,
                                        const TrainOptions& opt) {
  check_options(opt);
  if (model.lr.weights.final_conv != model.hr.weights.final_conv) {
    throw std::invalid_argument("train_lr_branch: LR branch must share the HR final conv");
  }
  // The HR branch is frozen, so its features for every pair are fixed.
  struct Cached {
    Tensor keyframe_features;
    Tensor target_features;
    Tensor target_logits;
  };
  std::vector<Cached> cache;
  cache.reserve(data.size());
  for (const auto& pair : data) {
    Cached c{backbone::forward_features(model.hr, pair.keyframe),
             backbone::forward_features(model.hr, pair.target), {}};
    if (opt.feature_loss == FeatureLoss::Kl) {
      c.target_logits = backbone::forward_logits(model.hr, c.target_features);
    }
    cache.push_back(std::move(c));
  }

  std::vector<LossRecord> history;
  SgdMomentum sgd(opt.learning_rate, opt.momentum);
  std::mt19937_64 rng(opt.seed);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    for (const auto idx : epoch_order(data.size(), opt.shuffle, rng)) {
      const auto& pair = data[idx];
      const auto& cached = cache[idx];
      ad::Tape tape;
      const auto lr_vars = backbone::bind(tape, model.lr.weights, true, false);
      const auto fusion_vars = creff::bind(tape, model.fusion, model.fusion_weights, true);
      const ad::Var lr_feats =
          backbone::features(model.lr.arch, model.lr.scale, lr_vars, tape.leaf(pair.target));
      const ad::Var fused = creff::fuse(model.fusion, fusion_vars,
                                        tape.leaf(cached.keyframe_features), pair.motion, lr_feats);
      const ad::Var logits = backbone::logits(model.lr.arch, lr_vars, fused);
      const ad::Var ce = ad::cross_entropy(logits, pair.labels, opt.ignore_index);
      const ad::Var feature =
          opt.feature_loss == FeatureLoss::Mse
              ? ad::mse(fused, tape.leaf(cached.target_features))
              : ad::kl_divergence(tape.leaf(cached.target_logits), logits);
      const ad::Var total = ad::add(ce, feature);
      LossRecord rec{history.size(), total.value()[0], ce.value()[0], feature.value()[0]};
      check_finite(rec);
      tape.backward(total);

      std::vector<Param> params;
      collect(model.lr.weights, lr_vars, false, params);
      auto& fw = model.fusion_weights;
      if (model.fusion.uses_qkv()) {
        params.push_back({&fw.value.weight, fusion_vars.value_w});
        params.push_back({&fw.key.weight, fusion_vars.key_w});
        params.push_back({&fw.query.weight, fusion_vars.query_w});
        if (model.fusion.qkv_bias) {
          params.push_back({&fw.value.bias, fusion_vars.value_b});
          params.push_back({&fw.key.bias, fusion_vars.key_b});
          params.push_back({&fw.query.bias, fusion_vars.query_b});
        }
      } else if (model.fusion.variant == creff::Variant::ConvFusion) {
        params.push_back({&fw.fuse.weight, fusion_vars.fuse_w});
        params.push_back({&fw.fuse.bias, fusion_vars.fuse_b});
      }
      sgd.step(params);
      history.push_back(rec);
    }
  }
  return history;
}

double normalize_feature_scale(Branch& hr, std::span<const Tensor> frames) {
  if (frames.empty()) throw std::invalid_argument("normalize_feature_scale: no frames");
  double sum = 0.0, count = 0.0;
  for (const auto& f : frames) {
    const Tensor feats = backbone::forward_features(hr, f);
    for (double v : feats.data()) sum += v * v;
    count += static_cast<double>(feats.size());
  }
  const double s = std::sqrt(sum / count);
  if (!(s > 0.0) || !std::isfinite(s)) {
    throw NumericalError("normalize_feature_scale: features are identically zero or not finite");
  }
  auto& last = hr.weights.task.back();
  for (auto& v : last.weight.data()) v /= s;
  for (auto& v : last.bias.data()) v /= s;
  for (auto& v : hr.weights.final_conv->weight.data()) v *= s;
  return s;
}

std::vector<std::uint8_t> frozen_bytes(const ArModel& model) {
  return backbone::encode_checkpoint(backbone::flatten(model.hr.weights, true));
}

std::string loss_history_csv(std::span<const LossRecord> history) {
  std::ostringstream os;
  os.precision(17);
  os << "step,total,ce,mse\n";
  for (const auto& r : history) {
    os << r.step << ',' << r.total << ',' << r.ce << ',' << r.feature << '\n';
  }
  return os.str();
}

}  // namespace arseg::fst
