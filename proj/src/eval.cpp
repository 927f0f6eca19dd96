#include "arseg/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "arseg/errors.hpp"
#include "arseg/tensor_ops.hpp"

namespace arseg::eval {

std::vector<ScheduleEntry> gop_schedule(std::size_t frame_count, std::size_t gop_length) {
  if (gop_length == 0) throw std::invalid_argument("gop_schedule: L must be >= 1");
  std::vector<ScheduleEntry> out;
  out.reserve(frame_count);
  for (std::size_t t = 0; t < frame_count; ++t) {
    const std::size_t d = t % gop_length;
    out.push_back({t, d == 0 ? BranchKind::HR : BranchKind::LR, t - d, d});
  }
  return out;
}

// ---------------------------------------------------------------- inference

namespace {

struct FrameRun {
  Tensor logits;
  Tensor features;  // only kept for keyframes
  double flops = 0.0;
};

FrameRun run_keyframe(const backbone::Branch& hr, const Tensor& frame) {
  ad::Tape tape;
  const auto vars = backbone::bind(tape, hr.weights, false, false);
  ad::Var feats = backbone::features(hr.arch, hr.scale, vars, tape.leaf(frame));
  feats = ad::bilinear_resize(feats, frame.dim(1), frame.dim(2));
  const ad::Var logits = backbone::logits(hr.arch, vars, feats);
  return {logits.value(), feats.value(), tape.flops()};
}

FrameRun run_non_keyframe(const fst::ArModel& m, const Tensor& keyframe_features,
                          const Tensor& motion, const Tensor& frame) {
  ad::Tape tape;
  const auto lr_vars = backbone::bind(tape, m.lr.weights, false, false);
  const ad::Var key = tape.leaf(keyframe_features);
  ad::Var fused;
  if (m.fusion.variant == creff::Variant::WarpOnly) {
    fused = creff::warp_features(key, motion);
  } else {
    const auto fusion_vars = creff::bind(tape, m.fusion, m.fusion_weights, false);
    const ad::Var f_p = backbone::features(m.lr.arch, m.lr.scale, lr_vars, tape.leaf(frame));
    fused = creff::fuse(m.fusion, fusion_vars, key, motion, f_p);
  }
  const ad::Var logits = backbone::logits(m.lr.arch, lr_vars, fused);
  return {logits.value(), {}, tape.flops()};
}

}  // namespace

SequenceOutput run_sequence(std::span<const Tensor> frames,
                            std::span<const std::optional<codec::MotionField>> motion,
                            std::span<const ScheduleEntry> schedule, const fst::ArModel& model) {
  if (motion.size() != frames.size()) {
    throw std::invalid_argument("run_sequence: motion list does not match the frame count");
  }
  SequenceOutput out;
  std::optional<std::size_t> cached_index;
  Tensor cached;
  for (const auto& e : schedule) {
    if (e.frame >= frames.size()) {
      throw std::invalid_argument("run_sequence: schedule names frame " + std::to_string(e.frame) +
                                  " beyond the clip");
    }
    const Tensor& frame = frames[e.frame];
    FrameRun run;
    if (e.branch == BranchKind::HR) {
      run = run_keyframe(model.hr, frame);
      cached = std::move(run.features);
      cached_index = e.frame;
    } else {
      if (cached_index != e.keyframe) {
        throw std::invalid_argument("run_sequence: no cached features for keyframe " +
                                    std::to_string(e.keyframe) + " of frame " +
                                    std::to_string(e.frame));
      }
      if (!motion[e.frame]) {
        throw std::invalid_argument("run_sequence: frame " + std::to_string(e.frame) +
                                    " has no motion field");
      }
      const Tensor mv = codec::expand_mv(*motion[e.frame], frame.dim(1), frame.dim(2));
      run = run_non_keyframe(model, cached, mv, frame);
    }
    out.flops += run.flops;
    out.labels.push_back(ops::argmax_channels(run.logits));
    out.logits.push_back(std::move(run.logits));
    out.schedule.push_back(e);
  }
  return out;
}

SequenceOutput run_sequence(const codec::EncodedClip& clip, const fst::ArModel& model) {
  const auto decoded = codec::decode_clip(clip);
  const auto schedule = gop_schedule(decoded.frames.size(), clip.params.gop_length);
  return run_sequence(decoded.frames, decoded.motion, schedule, model);
}

Tensor branch_logits(const backbone::Branch& branch, const Tensor& frame) {
  const Tensor feats = ops::bilinear_resize(backbone::forward_features(branch, frame),
                                            frame.dim(1), frame.dim(2));
  return backbone::forward_logits(branch, feats);
}

Tensor fused_logits(const fst::ArModel& model, const Tensor& keyframe_features,
                    const Tensor& motion, const Tensor& target) {
  return run_non_keyframe(model, keyframe_features, motion, target).logits;
}

// ------------------------------------------------------------------ metrics

Confusion::Confusion(std::size_t num_classes, std::int32_t ignore_index)
    : k_(num_classes), ignore_(ignore_index), m_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw std::invalid_argument("mIoU: need at least one class");
}

void Confusion::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("mIoU: prediction is " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + ", ground truth " + std::to_string(gt.height) +
                     "x" + std::to_string(gt.width));
  }
  const auto k = static_cast<std::int32_t>(k_);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::int32_t g = gt.labels[i];
    if (g == ignore_) continue;
    const std::int32_t p = pred.labels[i];
    if (g < 0 || g >= k) throw std::invalid_argument("mIoU: ground-truth label out of range");
    if (p < 0 || p >= k) throw std::invalid_argument("mIoU: predicted label out of range");
    ++m_[static_cast<std::size_t>(g) * k_ + static_cast<std::size_t>(p)];
  }
}

MiouResult Confusion::result() const {
  MiouResult r;
  r.per_class.resize(k_);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k_; ++j) {
      row += m_[c * k_ + j];
      col += m_[j * k_ + c];
    }
    const std::uint64_t inter = m_[c * k_ + c];
    const std::uint64_t uni = row + col - inter;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(inter) / static_cast<double>(uni);
    sum += *r.per_class[c];
    ++present;
  }
  if (present > 0) r.miou = sum / static_cast<double>(present);
  return r;
}

MiouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes,
                std::int32_t ignore_index) {
  Confusion c(num_classes, ignore_index);
  c.add(pred, gt);
  return c.result();
}

DistanceTable miou_by_distance(std::span<const AnnotatedClip> clips, const fst::ArModel& model,
                               std::size_t gop_length, const MotionSearch& search,
                               std::int32_t ignore_index) {
  if (gop_length == 0) throw std::invalid_argument("miou_by_distance: L must be >= 1");
  const std::size_t k = model.hr.arch.num_classes;
  std::vector<Confusion> per_d(gop_length, Confusion(k, ignore_index));
  DistanceTable table;
  table.rows.resize(gop_length);
  for (std::size_t d = 0; d < gop_length; ++d) table.rows[d].distance = d;

  for (const auto& clip : clips) {
    std::map<std::size_t, FrameRun> hr_cache;
    auto hr = [&](std::size_t t) -> const FrameRun& {
      auto it = hr_cache.find(t);
      if (it == hr_cache.end()) it = hr_cache.emplace(t, run_keyframe(model.hr, clip.frames[t])).first;
      return it->second;
    };
    for (const auto& [p, gt] : clip.labels) {
      if (p >= clip.frames.size()) {
        throw std::invalid_argument("miou_by_distance: annotation for missing frame " +
                                    std::to_string(p));
      }
      const Tensor& frame = clip.frames[p];
      for (std::size_t d = 0; d < gop_length; ++d) {
        if (d > p) {
          ++table.skipped;
          continue;
        }
        Tensor logits;
        if (d == 0) {
          logits = hr(p).logits;
        } else {
          const Tensor& key = clip.frames[p - d];
          const auto field = codec::estimate_motion(key, frame, search.block_size,
                                                    search.search_range);
          const Tensor mv = codec::expand_mv(field, frame.dim(1), frame.dim(2));
          logits = fused_logits(model, hr(p - d).features, mv, frame);
        }
        per_d[d].add(ops::argmax_channels(logits), gt);
        ++table.rows[d].frames;
      }
    }
  }

  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t d = 0; d < gop_length; ++d) {
    if (table.rows[d].frames == 0) continue;
    table.rows[d].miou = per_d[d].result().miou;
    if (table.rows[d].miou) {
      sum += *table.rows[d].miou;
      ++defined;
    }
  }
  if (defined > 0) table.overall = sum / static_cast<double>(defined);
  return table;
}

std::optional<double> miou_single_branch(std::span<const AnnotatedClip> clips,
                                         const backbone::Branch& branch,
                                         std::int32_t ignore_index) {
  Confusion conf(branch.arch.num_classes, ignore_index);
  for (const auto& clip : clips) {
    for (const auto& [p, gt] : clip.labels) {
      conf.add(ops::argmax_channels(branch_logits(branch, clip.frames.at(p))), gt);
    }
  }
  return conf.result().miou;
}

// --------------------------------------------------------------------- cost

CostReport amortized_cost(double hr_flops, double lr_flops, double creff_flops,
                          std::size_t gop_length) {
  if (gop_length == 0) throw std::invalid_argument("amortized_cost: L must be >= 1");
  if (hr_flops < 0.0 || lr_flops < 0.0 || creff_flops < 0.0) {
    throw std::invalid_argument("amortized_cost: costs must be non-negative");
  }
  CostReport r;
  r.hr_frame_flops = hr_flops;
  r.lr_frame_flops = lr_flops;
  r.creff_flops = creff_flops;
  r.gop_length = gop_length;
  const double l = static_cast<double>(gop_length);
  r.average = (hr_flops + (l - 1.0) * (lr_flops + creff_flops)) / l;
  r.ratio = hr_flops > 0.0 ? r.average / hr_flops : 0.0;
  return r;
}

CostReport pipeline_cost(const fst::ArModel& model, std::size_t height, std::size_t width,
                         std::size_t gop_length) {
  const auto& arch = model.lr.arch;
  const double hr = backbone::flops_of(model.hr.arch, model.hr.scale, height, width).total();
  double lr = backbone::final_conv_cost(arch, height, width).total();
  if (model.fusion.variant != creff::Variant::WarpOnly) {
    lr += backbone::feature_cost(arch, model.lr.scale, height, width).total();
  }
  const auto [lh, lw] = backbone::scaled_size(model.lr.scale, height, width);
  const double fusion =
      creff::fusion_cost(model.fusion, arch.feature_channels, height, width, lh, lw).total();
  return amortized_cost(hr, lr, fusion, gop_length);
}

// ------------------------------------------------------------- rate curves

RateCurve::RateCurve(std::vector<RatePoint> points) : points_(std::move(points)) {
  if (points_.size() < 2) throw std::invalid_argument("rate curve: need at least two points");
  for (const auto& p : points_) {
    if (!(p.flops > 0.0) || !std::isfinite(p.flops)) {
      throw std::invalid_argument("rate curve: FLOPs must be positive and finite");
    }
    if (!(p.miou >= 0.0 && p.miou <= 100.0)) {
      throw std::invalid_argument("rate curve: mIoU must lie in [0, 100]");
    }
  }
  std::sort(points_.begin(), points_.end(),
            [](const RatePoint& a, const RatePoint& b) { return a.flops < b.flops; });
}

namespace {

// Least-squares polynomial y(x) of degree min(3, n-1), centred on mean(x).
struct Poly {
  double centre = 0.0;
  Eigen::VectorXd coef;

  double integral(double a, double b) const {
    auto prim = [&](double x) {
      const double u = x - centre;
      double s = 0.0, pw = u;
      for (Eigen::Index i = 0; i < coef.size(); ++i) {
        s += coef[i] * pw / static_cast<double>(i + 1);
        pw *= u;
      }
      return s;
    };
    return prim(b) - prim(a);
  }
};

Poly fit(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<Eigen::Index>(x.size());
  const Eigen::Index degree = std::min<Eigen::Index>(3, n - 1);
  Poly p;
  for (double v : x) p.centre += v;
  p.centre /= static_cast<double>(n);
  Eigen::MatrixXd a(n, degree + 1);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double pw = 1.0;
    for (Eigen::Index j = 0; j <= degree; ++j) {
      a(i, j) = pw;
      pw *= x[static_cast<std::size_t>(i)] - p.centre;
    }
    b[i] = y[static_cast<std::size_t>(i)];
  }
  p.coef = a.colPivHouseholderQr().solve(b);
  return p;
}

// Mean of (test - anchor) over the overlap of the two x ranges.
double mean_gap(const std::vector<double>& ax, const std::vector<double>& ay,
                const std::vector<double>& tx, const std::vector<double>& ty, const char* what) {
  const auto [amin, amax] = std::minmax_element(ax.begin(), ax.end());
  const auto [tmin, tmax] = std::minmax_element(tx.begin(), tx.end());
  const double lo = std::max(*amin, *tmin), hi = std::min(*amax, *tmax);
  if (!(hi > lo)) {
    std::ostringstream os;
    os << "bd_metrics: " << what << " ranges do not overlap: anchor [" << *amin << ", " << *amax
       << "], test [" << *tmin << ", " << *tmax << "]";
    throw std::invalid_argument(os.str());
  }
  const Poly pa = fit(ax, ay), pt = fit(tx, ty);
  return (pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo);
}

}  // namespace

BdResult bd_metrics(const RateCurve& anchor, const RateCurve& test) {
  std::vector<double> alog, amiou, tlog, tmiou;
  for (const auto& p : anchor.points()) {
    alog.push_back(std::log10(p.flops));
    amiou.push_back(p.miou);
  }
  for (const auto& p : test.points()) {
    tlog.push_back(std::log10(p.flops));
    tmiou.push_back(p.miou);
  }
  BdResult r;
  r.bd_miou = mean_gap(alog, amiou, tlog, tmiou, "log10-FLOPs");
  const double log_gap = mean_gap(amiou, alog, tmiou, tlog, "mIoU");
  r.bd_flops_percent = (std::pow(10.0, log_gap) - 1.0) * 100.0;
  return r;
}

RateCurve read_rate_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw FormatError("rate curve CSV is empty", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "flops,miou") {
    throw FormatError("rate curve CSV: expected header 'flops,miou', got '" + line + "'", 0);
  }
  offset += line.size() + 1;
  std::vector<RatePoint> pts;
  while (std::getline(in, line)) {
    const std::size_t at = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing comma");
      std::size_t used_a = 0, used_b = 0;
      const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
      RatePoint p{std::stod(a, &used_a), std::stod(b, &used_b)};
      if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument("trailing text");
      pts.push_back(p);
    } catch (const std::exception&) {
      throw FormatError("rate curve CSV: malformed row '" + line + "' at byte " +
                            std::to_string(at),
                        at);
    }
  }
  return RateCurve(std::move(pts));
}

std::string write_rate_curve_csv(const RateCurve& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "flops,miou\n";
  for (const auto& p : curve.points()) os << p.flops << ',' << p.miou << '\n';
  return os.str();
}

std::string distance_report_csv(const DistanceTable& table, const CostReport& cost) {
  std::ostringstream os;
  os.precision(10);
  os << "d,miou,frames\n";
  for (const auto& r : table.rows) {
    os << r.distance << ',';
    if (r.miou) os << *r.miou;
    else os << "nan";
    os << ',' << r.frames << '\n';
  }
  os << "overall,";
  if (table.overall) os << *table.overall;
  else os << "nan";
  os << ',' << table.skipped << " skipped\n";
  os << "hr_frame_flops," << cost.hr_frame_flops << '\n';
  os << "lr_frame_flops," << cost.lr_frame_flops << '\n';
  os << "creff_flops," << cost.creff_flops << '\n';
  os << "gop_length," << cost.gop_length << '\n';
  os << "average_flops," << cost.average << '\n';
  os << "ratio," << cost.ratio << '\n';
  return os.str();
}

}  // namespace arseg::eval
