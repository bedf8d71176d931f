#pragma once

// Detection and segmentation evaluation: AP / mAP50, confusion matrices,
// mean IoU and mean accuracy, plus report serialization.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roadseg/detection.hpp"
#include "roadseg/label_map.hpp"

namespace roadseg::metrics {

/// IoU of two binary masks (nonzero = set). 1.0 when both are empty. Throws
/// DimensionError on a size mismatch.
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// Ground-truth box of one image.
struct GtBox {
  std::string image_id;
  det::BoundingBox box;
  int class_id = 0;
};

/// Square count matrix with a trailing background row/column.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  /// (num_classes+1)^2, row = truth, column = prediction.
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t k = 0) : num_classes(k), counts((k + 1) * (k + 1), 0) {}

  std::size_t dim() const { return num_classes + 1; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * dim() + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * dim() + pred]; }
  std::uint64_t total() const;
  /// Each row divided by its sum; empty rows stay zero.
  std::vector<double> normalized() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Pixel confusion of one label map pair; background pixels use the last index.
/// Throws ArgumentError on labels >= k other than the background value.
ConfusionMatrix pixel_confusion(const LabelMap& pred, const LabelMap& gt, std::size_t k);

struct PerClass {
  /// nullopt where the class is excluded (absent).
  std::vector<std::optional<double>> values;
  double mean = 0;
};

/// IoU of {pred=k} vs {gt=k}; mean over classes with a nonempty union.
PerClass mean_iou(const ConfusionMatrix& cm);
PerClass mean_iou(const LabelMap& pred, const LabelMap& gt, std::size_t k);

/// Per-class recall over gt pixels; mean over classes present in gt.
PerClass mean_accuracy(const ConfusionMatrix& cm);
PerClass mean_accuracy(const LabelMap& pred, const LabelMap& gt, std::size_t k);

/// Correct pixels over all non-background gt pixels (1.0 when there are none).
double pixel_accuracy(const ConfusionMatrix& cm);

/// Single-class AP with all-point interpolation. Detections are visited by
/// confidence (desc, then input order); each is a TP when some unmatched gt of
/// the same image has IoU >= threshold (the best such gt is consumed).
double average_precision(const std::vector<det::Detection>& dets, const std::vector<GtBox>& gts,
                         double iou_threshold = 0.5);

struct PrPoint {
  double confidence;
  double precision;
  double recall;
  bool true_positive;
};
/// Raw precision/recall after each detection in visiting order.
std::vector<PrPoint> pr_curve(const std::vector<det::Detection>& dets, const std::vector<GtBox>& gts,
                              double iou_threshold = 0.5);

/// Per-class AP (nullopt for classes without gts) and their mean.
PerClass map50(const std::vector<det::Detection>& dets, const std::vector<GtBox>& gts, std::size_t k);

/// Class-agnostic greedy matching by IoU (desc) per image, over detections
/// with confidence above the floor.
ConfusionMatrix detection_confusion_matrix(const std::vector<det::Detection>& dets,
                                           const std::vector<GtBox>& gts, std::size_t k,
                                           double iou_threshold = 0.5,
                                           double conf_floor = det::kConfidenceFloor);

/// Worker count for parallel evaluation: ROADSEG_THREADS if set (>= 1),
/// otherwise the hardware concurrency.
std::size_t worker_count();
/// Runs fn(i) for i in [0, n) on up to worker_count() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Sums per-image pixel confusions in image order.
ConfusionMatrix accumulate_pixel_confusion(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                                           std::size_t k);

struct DetectionReport {
  PerClass ap50;
  ConfusionMatrix confusion;
};

struct SegmentationReport {
  PerClass iou;
  PerClass accuracy;
  double pixel_accuracy = 0;
  ConfusionMatrix confusion;
};

struct EvalReport {
  std::vector<std::string> class_names;
  std::optional<DetectionReport> detection;
  std::optional<SegmentationReport> segmentation;

  std::string to_json() const;
  /// One row per class: class,ap50,iou,accuracy (empty where not applicable).
  std::string to_csv() const;
};

/// Grid CSV with a header row of predicted labels and a leading truth label.
std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                          bool normalized);

EvalReport evaluate_detections(const std::vector<det::Detection>& dets, const std::vector<GtBox>& gts,
                               const std::vector<std::string>& class_names, double iou_threshold = 0.5,
                               double conf_floor = det::kConfidenceFloor);
EvalReport evaluate_masks(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                          const std::vector<std::string>& class_names);

}  // namespace roadseg::metrics
