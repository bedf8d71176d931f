#pragma once

// Anchor-free detection head math: distribution box decoding, CIoU and DFL
// regression losses, BCE classification, task-aligned assignment and NMS.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "roadseg/autograd.hpp"

namespace roadseg::det {

/// Corner form, pixels.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 >= x1 && y2 >= y1; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Detection {
  BoundingBox box;
  int class_id = 0;
  double confidence = 0;
  std::string image_id;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruth {
  BoundingBox box;
  int class_id = 0;
};

/// Intersection over union; 0 when the union is empty.
double iou(const BoundingBox& a, const BoundingBox& b);

/// Per-row CIoU loss of pred[N,4] against target[N,4] (corner form) -> [N].
/// Differentiable in both arguments. Rows whose enclosing box has zero area
/// yield 0.
ag::Var ciou_loss(ag::Var pred, ag::Var target);
double ciou_loss(const BoundingBox& pred, const BoundingBox& target);

/// Distribution focal loss of one normalized distribution over bins
/// 0..reg_max at a continuous target. Throws ArgumentError when the target is
/// outside [0, reg_max].
double dfl_loss(std::span<const double> dist, double target);
/// Row-wise DFL of probs[N, reg_max+1] -> [N].
ag::Var dfl_loss(ag::Var probs, const std::vector<double>& targets);

/// Geometry of a prediction grid. A prediction tensor is [cells, channels()]
/// with cells in row-major grid order and columns
///   left bins | top bins | right bins | bottom bins | class logits.
struct HeadLayout {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t stride = 8;
  std::size_t num_classes = 1;
  std::size_t reg_max = 16;

  std::size_t bins() const { return reg_max + 1; }
  std::size_t cells() const { return grid_h * grid_w; }
  std::size_t channels() const { return 4 * bins() + num_classes; }
  double center_x(std::size_t cell) const;
  double center_y(std::size_t cell) const;
};

struct DecodedCell {
  BoundingBox box;
  std::vector<double> scores;
};

/// Offsets are the expectation over softmaxed bins in stride units; corners
/// are the cell center minus/plus offset * stride; scores are sigmoid(logits).
std::vector<DecodedCell> decode_boxes(const Tensor& pred, const HeadLayout& layout);

/// In-graph decode: boxes [cells,4] and class probabilities [cells,K].
struct DecodedVars {
  ag::Var boxes;
  ag::Var scores;
  ag::Var probs;  ///< softmaxed bins, [cells*4, bins]
};
DecodedVars decode_boxes(ag::Var pred, const HeadLayout& layout);

struct AssignParams {
  double alpha = 0.5;
  double beta = 6.0;
  std::size_t topk = 10;
};

struct Assignment {
  /// Index of the owning ground truth per cell, -1 when negative.
  std::vector<int> gt_of_cell;
  /// Alignment s^alpha * u^beta of each cell with its owner (0 for negatives).
  std::vector<double> align;
  /// IoU of each cell's box with its owner (0 for negatives).
  std::vector<double> overlap;

  /// Positive cells of one ground truth, ascending.
  std::vector<std::size_t> cells_of(int gt) const;
};

/// Per gt, the topk cells whose centers lie strictly inside the gt box ranked
/// by alignment (ties to the lower cell index). A cell claimed by several gts
/// goes to the one with the highest alignment (ties to the lower gt index).
Assignment task_aligned_assign(const std::vector<DecodedCell>& cells, const HeadLayout& layout,
                               const std::vector<GroundTruth>& gts, const AssignParams& params = {});

struct LossWeights {
  double cls = 0.5;
  double box = 7.5;
  double dfl = 1.5;
};

struct DetectionLoss {
  ag::Var total;
  double cls = 0;
  double box = 0;
  double dfl = 0;
  std::size_t positives = 0;
};

/// Classification targets: alignment * (max IoU / max alignment) of the owning
/// gt on positives, 0 elsewhere.
Tensor classification_targets(const Assignment& a, const std::vector<GroundTruth>& gts,
                               const HeadLayout& layout);

/// weights.cls * mean BCE over all cells and classes + weights.box * mean CIoU
/// over positives + weights.dfl * mean DFL over the four sides of positives.
DetectionLoss detection_loss(ag::Var pred, const HeadLayout& layout, const std::vector<GroundTruth>& gts,
                             const LossWeights& weights = {}, const AssignParams& params = {});

inline constexpr double kNmsIou = 0.45;
inline constexpr double kConfidenceFloor = 0.25;

/// Greedy per-class suppression of boxes with IoU above the threshold. Output
/// is ordered by confidence (desc), then input index.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold = kNmsIou);

/// Cells with a class score above the floor become detections, then nms.
std::vector<Detection> postprocess(const std::vector<DecodedCell>& cells, const std::string& image_id,
                                   double conf_floor = kConfidenceFloor, double iou_threshold = kNmsIou);

/// CSV columns: image_id,class_id,x1,y1,x2,y2,confidence
void write_detections_csv(std::ostream& os, const std::vector<Detection>& dets);
std::vector<Detection> read_detections_csv(std::istream& is);
void save_detections_csv(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections_csv(const std::filesystem::path& path);

}  // namespace roadseg::det
