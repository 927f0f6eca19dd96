#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arseg/codec.hpp"
#include "arseg/fst.hpp"
#include "arseg/tensor.hpp"

namespace arseg::eval {

// ------------------------------------------------------------- scheduling

enum class BranchKind { HR, LR };

struct ScheduleEntry {
  std::size_t frame = 0;
  BranchKind branch = BranchKind::HR;
  std::size_t keyframe = 0;
  std::size_t distance = 0;
  bool operator==(const ScheduleEntry&) const = default;
};

/// Frame t uses keyframe floor(t/L)·L at distance t mod L; distance 0 runs HR.
std::vector<ScheduleEntry> gop_schedule(std::size_t frame_count, std::size_t gop_length);

// -------------------------------------------------------------- inference

struct SequenceOutput {
  std::vector<Tensor> logits;
  std::vector<LabelMap> labels;
  std::vector<ScheduleEntry> schedule;
  double flops = 0.0;  // counted while executing
};

/// Runs a decoded clip: keyframes through the HR branch (features cached),
/// other frames through the LR branch, fusion with the cached keyframe
/// features and the frame's motion, then the shared final conv.
SequenceOutput run_sequence(std::span<const Tensor> frames,
                            std::span<const std::optional<codec::MotionField>> motion,
                            std::span<const ScheduleEntry> schedule, const fst::ArModel& model);
SequenceOutput run_sequence(const codec::EncodedClip& clip, const fst::ArModel& model);

/// Logits of a single branch at full output resolution (constant-resolution baseline).
Tensor branch_logits(const backbone::Branch& branch, const Tensor& frame);

/// Logits for frame `target` fused against the HR features of `keyframe`.
Tensor fused_logits(const fst::ArModel& model, const Tensor& keyframe_features,
                    const Tensor& motion, const Tensor& target);

// ---------------------------------------------------------------- metrics

struct MiouResult {
  std::optional<double> miou;                   // empty when no class is present
  std::vector<std::optional<double>> per_class;  // empty where absent from both maps
};

/// Accumulates a K×K confusion matrix (rows = ground truth).
class Confusion {
 public:
  Confusion(std::size_t num_classes, std::int32_t ignore_index);
  void add(const LabelMap& pred, const LabelMap& gt);
  MiouResult result() const;
  std::size_t num_classes() const noexcept { return k_; }
  std::uint64_t count(std::size_t gt, std::size_t pred) const { return m_[gt * k_ + pred]; }

 private:
  std::size_t k_;
  std::int32_t ignore_;
  std::vector<std::uint64_t> m_;
};

/// Per-class IoU over non-ignored pixels; classes absent from both maps are
/// left out of the mean.
MiouResult miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes,
                std::int32_t ignore_index);

/// Decoded frames with sparse annotations (frame index -> labels).
struct AnnotatedClip {
  std::vector<Tensor> frames;
  std::map<std::size_t, LabelMap> labels;
};

struct MotionSearch {
  std::size_t block_size = 4;
  int search_range = 16;
};

struct DistanceRow {
  std::size_t distance = 0;
  std::optional<double> miou;
  std::size_t frames = 0;
};

struct DistanceTable {
  std::vector<DistanceRow> rows;
  std::optional<double> overall;  // mean of the defined per-distance values
  std::size_t skipped = 0;        // (frame, d) cells without a keyframe p - d
};

/// For each annotated p and d in [0, L-1]: HR on p when d = 0, otherwise HR
/// on p - d, motion from p into p - d by block search, LR + fusion on p.
/// Each distance pools one confusion matrix over every scored frame.
DistanceTable miou_by_distance(std::span<const AnnotatedClip> clips, const fst::ArModel& model,
                               std::size_t gop_length, const MotionSearch& search,
                               std::int32_t ignore_index);

/// Pooled mIoU of one branch applied to every annotated frame.
std::optional<double> miou_single_branch(std::span<const AnnotatedClip> clips,
                                         const backbone::Branch& branch,
                                         std::int32_t ignore_index);

// ------------------------------------------------------------------- cost

struct CostReport {
  double hr_frame_flops = 0.0;
  double lr_frame_flops = 0.0;
  double creff_flops = 0.0;
  std::size_t gop_length = 1;
  double average = 0.0;   // (hr + (L-1)(lr + creff)) / L
  double ratio = 0.0;     // average / hr
};

CostReport amortized_cost(double hr_flops, double lr_flops, double creff_flops,
                          std::size_t gop_length);

/// Cost model of a pipeline on H×W frames. The LR path is the LR body plus
/// the final conv at full resolution; warp-only frames skip the LR body.
CostReport pipeline_cost(const fst::ArModel& model, std::size_t height, std::size_t width,
                         std::size_t gop_length);

// ------------------------------------------------------- rate comparisons

struct RatePoint {
  double flops = 0.0;
  double miou = 0.0;
};

/// At least two points with positive FLOPs, kept sorted by FLOPs.
class RateCurve {
 public:
  explicit RateCurve(std::vector<RatePoint> points);
  const std::vector<RatePoint>& points() const noexcept { return points_; }

 private:
  std::vector<RatePoint> points_;
};

struct BdResult {
  double bd_miou = 0.0;           // mean accuracy gap of test over anchor
  double bd_flops_percent = 0.0;  // mean compute change of test vs anchor at equal accuracy
};

/// Bjøntegaard-style comparison: cubic (or lower when fewer points)
/// least-squares fits in the log10-FLOPs domain, integrated over the
/// overlapping interval. Throws std::invalid_argument when ranges are disjoint.
BdResult bd_metrics(const RateCurve& anchor, const RateCurve& test);

RateCurve read_rate_curve_csv(const std::string& text);
std::string write_rate_curve_csv(const RateCurve& curve);

std::string distance_report_csv(const DistanceTable& table, const CostReport& cost);

}  // namespace arseg::eval
