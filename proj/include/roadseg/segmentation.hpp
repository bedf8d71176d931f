#pragma once

// Mask-classification segmentation: per-pixel and mask losses, bipartite
// matching, a small three-stage MaskFormer and its training loop.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roadseg/checkpoint.hpp"
#include "roadseg/error.hpp"
#include "roadseg/label_map.hpp"
#include "roadseg/layers.hpp"
#include "roadseg/optim.hpp"
#include "roadseg/random.hpp"

namespace roadseg::seg {

inline constexpr double kNoObjectWeight = 0.1;
inline constexpr double kBackgroundThreshold = 0.5;
/// Floor applied to probabilities before taking logs.
inline constexpr double kProbFloor = 1e-12;

/// Ground-truth segment: a real class and its binary mask (row-major, 0/1).
struct GtSegment {
  int class_id = 0;
  std::vector<std::uint8_t> mask;
};

/// One segment per class present in the label map, in class order.
std::vector<GtSegment> segments_from_labels(const LabelMap& labels, std::size_t k);

/// Sum over pixels of -ln p(gt). probs is [K, H, W]; every gt id must be < K.
double per_pixel_ce(const Tensor& probs, const LabelMap& gt);
double per_pixel_ce_mean(const Tensor& probs, const LabelMap& gt);
ag::Var per_pixel_ce(ag::Var probs, const LabelMap& gt);
ag::Var per_pixel_ce_mean(ag::Var probs, const LabelMap& gt);

struct MaskLossWeights {
  double bce = 1.0;
  double dice = 1.0;
};

/// bce * mean BCE + dice * (1 - 2 sum(p g) / (sum p + sum g)); the dice term
/// is 0 when both masks are empty.
double binary_mask_loss(std::span<const double> pred, std::span<const std::uint8_t> gt,
                        const MaskLossWeights& w = {});
ag::Var binary_mask_loss(ag::Var pred, std::span<const std::uint8_t> gt, const MaskLossWeights& w = {});

/// Minimum-cost injective assignment of the rows of cost [rows, cols] to
/// columns (rows <= cols). Result[j] is the column of row j. Among optimal
/// assignments the lexicographically smallest is returned. An empty tensor
/// gives an empty assignment.
std::vector<std::size_t> hungarian_match(const Tensor& cost);
/// Sum of cost[j, sigma[j]] in row order.
double assignment_cost(const Tensor& cost, std::span<const std::size_t> sigma);

struct MaskClsConfig {
  double no_object_weight = kNoObjectWeight;
  MaskLossWeights mask;
};

/// cost[j, i] = -p_i(c_j) + L_mask(m_i, m_j). probs is [N, K+1], masks [N, ...].
/// Empty tensor when there are no segments.
Tensor matching_cost(const Tensor& probs, const Tensor& masks, const std::vector<GtSegment>& gts,
                     const MaskClsConfig& cfg = {});

/// Loss under a given assignment: sum_j [-ln p_sigma(j)(c_j) + L_mask] plus
/// no_object_weight * sum over unassigned predictions of -ln p(no object).
double assignment_loss(const Tensor& probs, const Tensor& masks, const std::vector<GtSegment>& gts,
                       std::span<const std::size_t> sigma, const MaskClsConfig& cfg = {});

struct MaskClsLoss {
  ag::Var loss;
  std::vector<std::size_t> assignment;
};

/// Matches with hungarian_match on matching_cost, then builds the loss graph.
MaskClsLoss mask_cls_loss(ag::Var probs, ag::Var masks, const std::vector<GtSegment>& gts,
                          const MaskClsConfig& cfg = {});
double mask_cls_loss(const Tensor& probs, const Tensor& masks, const std::vector<GtSegment>& gts,
                     const MaskClsConfig& cfg = {}, std::vector<std::size_t>* assignment = nullptr);

/// score(k) = sum_i p_i(k) m_i per pixel over real classes; argmax (lowest k on
/// ties), background where the best score is below the threshold.
/// probs [N, K+1], masks [N, H, W].
LabelMap semantic_inference(const Tensor& probs, const Tensor& masks, double threshold = kBackgroundThreshold);

struct MaskFormerConfig {
  std::size_t num_classes = 4;
  std::size_t queries = 20;
  std::size_t embed_dim = 64;
  /// Feature map stride; a power of two >= 2.
  std::size_t stride = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t stem_channels = 16;
  std::size_t feature_channels = 32;
};

/// Throws ConfigError on zero sizes, a non power-of-two stride or image sizes
/// not divisible by the stride.
void validate(const MaskFormerConfig& cfg);

struct SegmentationOutput {
  /// [N, K+1]
  ag::Var probs;
  /// [N, H, W]
  ag::Var masks;
};

struct SegmentationPrediction {
  Tensor probs;
  Tensor masks;
};

/// Pixel module: stem conv, stride-2 convs down to F [C_F, H/S, W/S], then an
/// upsampling decoder with a stem skip to per-pixel embeddings [D, H, W].
/// Transformer module: N learnable queries cross-attend over the flattened F
/// (plus learnable positional embeddings). Segmentation module: 2-hidden-layer
/// MLP to mask embeddings, dense + softmax class head over K+1.
class ToyMaskFormer {
 public:
  ToyMaskFormer(const MaskFormerConfig& cfg, std::uint64_t seed);

  /// image: [1, 3, H, W].
  SegmentationOutput forward(ag::Var image, ag::ForwardContext& ctx);
  /// Same, with the query embeddings supplied as a graph input [N, D].
  SegmentationOutput forward(ag::Var image, ag::Var queries, ag::ForwardContext& ctx);

  /// image: [3, H, W].
  SegmentationPrediction predict(const Tensor& image);
  LabelMap predict_labels(const Tensor& image, double threshold = kBackgroundThreshold);

  std::vector<ag::Parameter*> parameters();
  std::size_t parameter_count();
  std::vector<NamedTensor> state_dict();
  void load_state_dict(const std::vector<NamedTensor>& state);

  ag::Parameter& queries() { return queries_; }
  /// Last layer of the mask-embedding MLP.
  ag::Dense& mask_embed_head() { return mlp3_; }
  const MaskFormerConfig& config() const { return cfg_; }

 private:
  ag::Var embed_pixels(ag::Var stem, ag::Var features, ag::ForwardContext& ctx);

  MaskFormerConfig cfg_;
  Rng init_;
  ag::Conv2d stem_;
  std::vector<ag::Conv2d> down_;
  ag::Conv2d lateral_, skip_, pixel_out_;
  ag::Parameter pos_;
  ag::Parameter queries_;
  ag::Dense key_, value_, attn_out_, ffn1_, ffn2_;
  ag::Dense mlp1_, mlp2_, mlp3_;
  ag::Dense class_head_;
};

struct SegSample {
  /// [3, H, W] in [0, 1].
  Tensor image;
  LabelMap labels;
};

struct SegTrainConfig {
  MaskFormerConfig model;
  std::size_t epochs = 35;
  /// Stop after this many optimizer steps; 0 means run all epochs.
  std::size_t max_steps = 0;
  /// Images per optimizer step (loss is the batch mean).
  std::size_t batch_size = 1;
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::uint64_t seed = 42;
  MaskClsConfig loss;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double train_loss = 0;
  double val_loss = 0;
  double miou = 0;
  double mean_acc = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct SegTrainLog {
  std::vector<EpochRecord> epochs;
  /// Index into epochs of the minimum validation loss (first on ties).
  std::size_t best_epoch = 0;
  /// CSV with header: epoch,train_loss,val_loss,mIoU,mean_acc
  std::string to_csv() const;
};

struct SegEvaluation {
  double loss = 0;
  double miou = 0;
  double mean_acc = 0;
  std::vector<LabelMap> predictions;
};

/// Mean mask-classification loss and pixel metrics of the model over samples.
SegEvaluation evaluate_segmentation(ToyMaskFormer& model, const std::vector<SegSample>& samples,
                                    const MaskClsConfig& loss = {});

/// Adam on the mask-classification loss with a seeded shuffle each epoch.
/// Validation metrics are computed on `val`, or on `train` when `val` is empty.
class SegTrainer {
 public:
  SegTrainer(std::vector<SegSample> train, std::vector<SegSample> val, SegTrainConfig cfg);

  /// One optimizer step; returns the batch loss.
  double step();
  /// Runs one epoch (or up to max_steps) and evaluates it.
  EpochRecord run_epoch();
  /// Runs all epochs, keeping the state of the best validation epoch.
  SegTrainLog train(const std::function<void(const EpochRecord&)>& on_epoch = {});

  /// Swaps in a new training set of the same size and image shape, e.g. a
  /// freshly augmented copy between epochs.
  void set_training_data(std::vector<SegSample> train);

  bool done() const;
  std::size_t steps_done() const { return step_; }
  ToyMaskFormer& model() { return model_; }
  const std::vector<NamedTensor>& best_state() const { return best_state_; }
  const SegTrainLog& log() const { return log_; }
  const SegTrainConfig& config() const { return cfg_; }

 private:
  std::vector<SegSample> train_, val_;
  std::vector<std::vector<GtSegment>> train_segments_;
  SegTrainConfig cfg_;
  ToyMaskFormer model_;
  ag::AdamState opt_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  SegTrainLog log_;
  std::vector<NamedTensor> best_state_;
};

}  // namespace roadseg::seg
