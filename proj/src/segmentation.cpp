#include "roadseg/segmentation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "roadseg/metrics.hpp"

namespace roadseg::seg {

using ag::Tape;
using ag::Var;

namespace {

std::size_t class_count(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(1) < 2)
    throw DimensionError("class probabilities must be [N, K+1], got " + shape_str(probs.shape()));
  return probs.dim(1);
}

std::size_t mask_pixels(const Tensor& masks, std::size_t n) {
  if (masks.rank() < 2 || masks.dim(0) != n)
    throw DimensionError("masks " + shape_str(masks.shape()) + " do not match " + std::to_string(n) +
                         " predictions");
  return masks.size() / n;
}

void check_segments(const std::vector<GtSegment>& gts, std::size_t k, std::size_t pixels) {
  for (std::size_t j = 0; j < gts.size(); ++j) {
    if (gts[j].class_id < 0 || static_cast<std::size_t>(gts[j].class_id) >= k)
      throw ArgumentError("segment " + std::to_string(j) + " has class " + std::to_string(gts[j].class_id) +
                          ", expected [0, " + std::to_string(k) + ")");
    if (gts[j].mask.size() != pixels)
      throw DimensionError("segment " + std::to_string(j) + " mask has " + std::to_string(gts[j].mask.size()) +
                           " pixels, predictions have " + std::to_string(pixels));
  }
}

double neg_log(double p) { return -std::log(std::clamp(p, kProbFloor, 1.0)); }

Var neg_log_sum(Var probs, std::vector<std::size_t> idx) {
  return neg(sum(log(clamp(gather(probs, std::move(idx)), kProbFloor, 1.0))));
}

void check_ce_inputs(const Shape& shape, const LabelMap& gt) {
  if (shape.size() != 3 || shape[1] != gt.height || shape[2] != gt.width)
    throw DimensionError("per-pixel probabilities " + shape_str(shape) + " do not match a " +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width) + " label map");
  for (auto v : gt.labels)
    if (v >= shape[0])
      throw ArgumentError("label " + std::to_string(v) + " outside [0, " + std::to_string(shape[0]) + ")");
}

std::vector<std::size_t> ce_indices(const LabelMap& gt) {
  std::vector<std::size_t> idx(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) idx[i] = gt.labels[i] * gt.size() + i;
  return idx;
}

}  // namespace

std::vector<GtSegment> segments_from_labels(const LabelMap& labels, std::size_t k) {
  std::vector<bool> present(k, false);
  for (auto v : labels.labels) {
    if (v == kBackground) continue;
    if (v >= k) throw ArgumentError("label " + std::to_string(v) + " outside [0, " + std::to_string(k) + ")");
    present[v] = true;
  }
  std::vector<GtSegment> out;
  for (std::size_t c = 0; c < k; ++c) {
    if (!present[c]) continue;
    GtSegment s{static_cast<int>(c), std::vector<std::uint8_t>(labels.size(), 0)};
    for (std::size_t i = 0; i < labels.size(); ++i) s.mask[i] = labels.labels[i] == c;
    out.push_back(std::move(s));
  }
  return out;
}

double per_pixel_ce(const Tensor& probs, const LabelMap& gt) {
  check_ce_inputs(probs.shape(), gt);
  double total = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += neg_log(probs[gt.labels[i] * gt.size() + i]);
  return total;
}

double per_pixel_ce_mean(const Tensor& probs, const LabelMap& gt) {
  return per_pixel_ce(probs, gt) / static_cast<double>(std::max<std::size_t>(gt.size(), 1));
}

Var per_pixel_ce(Var probs, const LabelMap& gt) {
  check_ce_inputs(probs.shape(), gt);
  if (gt.size() == 0) return probs.tape().constant(Tensor::scalar(0.0));
  return neg_log_sum(probs, ce_indices(gt));
}

Var per_pixel_ce_mean(Var probs, const LabelMap& gt) {
  return scale(per_pixel_ce(probs, gt), 1.0 / static_cast<double>(std::max<std::size_t>(gt.size(), 1)));
}

double binary_mask_loss(std::span<const double> pred, std::span<const std::uint8_t> gt, const MaskLossWeights& w) {
  if (pred.size() != gt.size())
    throw DimensionError("mask sizes differ: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  if (pred.empty()) throw ArgumentError("binary_mask_loss: empty mask");
  double bce = 0, inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double q = std::clamp(pred[i], ag::kBceClamp, 1.0 - ag::kBceClamp);
    const double g = gt[i] ? 1.0 : 0.0;
    bce -= g * std::log(q) + (1.0 - g) * std::log(1.0 - q);
    inter += pred[i] * g;
    ps += pred[i];
    gs += g;
  }
  const double dice = ps + gs == 0 ? 0.0 : 1.0 - 2.0 * inter / (ps + gs);
  return w.bce * bce / static_cast<double>(pred.size()) + w.dice * dice;
}

Var binary_mask_loss(Var pred, std::span<const std::uint8_t> gt, const MaskLossWeights& w) {
  if (pred.size() != gt.size())
    throw DimensionError("mask sizes differ: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  if (gt.empty()) throw ArgumentError("binary_mask_loss: empty mask");
  Tape& t = pred.tape();
  Tensor y(pred.shape());
  double gs = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) gs += y[i] = gt[i] ? 1.0 : 0.0;
  Var loss = scale(ag::bce_loss(pred, y), w.bce);
  double ps = 0;
  for (double v : pred.value().data()) ps += v;
  if (ps + gs == 0) return loss;
  Var inter = sum(mul(pred, t.constant(y)));
  Var denom = add_scalar(sum(pred), gs);
  Var dice = add_scalar(scale(div(inter, denom), -2.0), 1.0);
  return add(loss, scale(dice, w.dice));
}

namespace {

// Potentials-based O(n^2 m) assignment for an n x m row-major matrix, n <= m.
std::vector<std::size_t> solve_assignment(const std::vector<double>& a, std::size_t n, std::size_t m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> out(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j]) out[p[j] - 1] = j - 1;
  return out;
}

// Optimal cost of the sub-problem on the given rows and columns.
double optimal_cost(const Tensor& cost, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  if (rows.empty()) return 0.0;
  const std::size_t m = cost.dim(1);
  std::vector<double> sub(rows.size() * cols.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) sub[r * cols.size() + c] = cost[rows[r] * m + cols[c]];
  const auto sol = solve_assignment(sub, rows.size(), cols.size());
  double total = 0;
  for (std::size_t r = 0; r < rows.size(); ++r) total += sub[r * cols.size() + sol[r]];
  return total;
}

}  // namespace

std::vector<std::size_t> hungarian_match(const Tensor& cost) {
  if (cost.empty()) return {};
  if (cost.rank() != 2) throw DimensionError("cost matrix must be rank 2, got " + shape_str(cost.shape()));
  const std::size_t n = cost.dim(0), m = cost.dim(1);
  if (n > m)
    throw ArgumentError("cannot match " + std::to_string(n) + " targets to " + std::to_string(m) + " predictions");
  for (double v : cost.data())
    if (!std::isfinite(v)) throw ArgumentError("cost matrix has a non-finite entry");
  std::vector<std::size_t> all_rows(n), free_cols(m);
  std::iota(all_rows.begin(), all_rows.end(), 0);
  std::iota(free_cols.begin(), free_cols.end(), 0);
  const double best = optimal_cost(cost, all_rows, free_cols);
  double scale_sum = 0;
  for (double v : cost.data()) scale_sum = std::max(scale_sum, std::abs(v));
  const double tol = 1e-11 * (1.0 + scale_sum) * static_cast<double>(n);

  // Fix rows in order to the smallest column that still admits an optimum.
  std::vector<std::size_t> sigma(n);
  double fixed = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::span<const std::size_t> rest_rows(all_rows.begin() + static_cast<long>(j) + 1, all_rows.end());
    std::size_t pick = free_cols.size(), fallback = 0;
    double fallback_total = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < free_cols.size(); ++k) {
      std::vector<std::size_t> rest_cols(free_cols);
      rest_cols.erase(rest_cols.begin() + static_cast<long>(k));
      const double total = fixed + cost[j * m + free_cols[k]] + optimal_cost(cost, rest_rows, rest_cols);
      if (total <= best + tol) {
        pick = k;
        break;
      }
      if (total < fallback_total) {
        fallback_total = total;
        fallback = k;
      }
    }
    if (pick == free_cols.size()) pick = fallback;
    sigma[j] = free_cols[pick];
    fixed += cost[j * m + sigma[j]];
    free_cols.erase(free_cols.begin() + static_cast<long>(pick));
  }
  return sigma;
}

double assignment_cost(const Tensor& cost, std::span<const std::size_t> sigma) {
  double total = 0;
  for (std::size_t j = 0; j < sigma.size(); ++j) total += cost[j * cost.dim(1) + sigma[j]];
  return total;
}

Tensor matching_cost(const Tensor& probs, const Tensor& masks, const std::vector<GtSegment>& gts,
                     const MaskClsConfig& cfg) {
  const std::size_t k1 = class_count(probs), n = probs.dim(0), hw = mask_pixels(masks, n);
  check_segments(gts, k1 - 1, hw);
  if (gts.empty()) return Tensor();
  Tensor cost({gts.size(), n});
  for (std::size_t j = 0; j < gts.size(); ++j)
    for (std::size_t i = 0; i < n; ++i)
      cost[j * n + i] = -probs[i * k1 + static_cast<std::size_t>(gts[j].class_id)] +
                        binary_mask_loss(masks.data().subspan(i * hw, hw), gts[j].mask, cfg.mask);
  return cost;
}

double assignment_loss(const Tensor& probs, const Tensor& masks, const std::vector<GtSegment>& gts,
                       std::span<const std::size_t> sigma, const MaskClsConfig& cfg) {
  const std::size_t k1 = class_count(probs), n = probs.dim(0), hw = mask_pixels(masks, n);
  check_segments(gts, k1 - 1, hw);
  if (sigma.size() != gts.size()) throw DimensionError("assignment size does not match the segment count");
  std::vector<bool> matched(n, false);
  double total = 0;
  for (std::size_t j = 0; j < gts.size(); ++j) {
    const std::size_t i = sigma[j];
    if (i >= n || matched[i]) throw ArgumentError("assignment is not injective into the predictions");
    matched[i] = true;
    total += neg_log(probs[i * k1 + static_cast<std::size_t>(gts[j].class_id)]);
    total += binary_mask_loss(masks.data().subspan(i * hw, hw), gts[j].mask, cfg.mask);
  }
  double empty = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (!matched[i]) empty += neg_log(probs[i * k1 + k1 - 1]);
  return total + cfg.no_object_weight * empty;
}

MaskClsLoss mask_cls_loss(Var probs, Var masks, const std::vector<GtSegment>& gts, const MaskClsConfig& cfg) {
  const Tensor cost = matching_cost(probs.value(), masks.value(), gts, cfg);
  MaskClsLoss out;
  out.assignment = hungarian_match(cost);
  const std::size_t n = probs.value().dim(0), k1 = probs.value().dim(1), hw = masks.size() / n;

  Tape& t = probs.tape();
  Var total = t.constant(Tensor::scalar(0.0));
  std::vector<bool> matched(n, false);
  std::vector<std::size_t> cls_idx;
  for (std::size_t j = 0; j < gts.size(); ++j) {
    const std::size_t i = out.assignment[j];
    matched[i] = true;
    cls_idx.push_back(i * k1 + static_cast<std::size_t>(gts[j].class_id));
    std::vector<std::size_t> rows(hw);
    std::iota(rows.begin(), rows.end(), i * hw);
    total = add(total, binary_mask_loss(gather(masks, std::move(rows)), gts[j].mask, cfg.mask));
  }
  if (!cls_idx.empty()) total = add(total, neg_log_sum(probs, std::move(cls_idx)));
  std::vector<std::size_t> empty_idx;
  for (std::size_t i = 0; i < n; ++i)
    if (!matched[i]) empty_idx.push_back(i * k1 + k1 - 1);
  if (!empty_idx.empty() && cfg.no_object_weight != 0)
    total = add(total, scale(neg_log_sum(probs, std::move(empty_idx)), cfg.no_object_weight));
  out.loss = total;
  return out;
}

double mask_cls_loss(const Tensor& probs, const Tensor& masks, const std::vector<GtSegment>& gts,
                     const MaskClsConfig& cfg, std::vector<std::size_t>* assignment) {
  const auto sigma = hungarian_match(matching_cost(probs, masks, gts, cfg));
  if (assignment) *assignment = sigma;
  return assignment_loss(probs, masks, gts, sigma, cfg);
}

LabelMap semantic_inference(const Tensor& probs, const Tensor& masks, double threshold) {
  const std::size_t k1 = class_count(probs), n = probs.dim(0), k = k1 - 1;
  if (masks.rank() != 3 || masks.dim(0) != n)
    throw DimensionError("masks must be [N, H, W] with N = " + std::to_string(n) + ", got " +
                         shape_str(masks.shape()));
  LabelMap out(masks.dim(1), masks.dim(2));
  const std::size_t hw = out.size();
  std::vector<double> score(k);
  for (std::size_t px = 0; px < hw; ++px) {
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = masks[i * hw + px];
      for (std::size_t c = 0; c < k; ++c) score[c] += probs[i * k1 + c] * m;
    }
    const auto best = std::max_element(score.begin(), score.end());
    if (*best >= threshold) out.labels[px] = static_cast<std::uint8_t>(best - score.begin());
  }
  return out;
}

// ---- model ---------------------------------------------------------------

void validate(const MaskFormerConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.num_classes >= kBackground)
    throw ConfigError("num_classes must be in [1, 254], got " + std::to_string(cfg.num_classes));
  if (cfg.queries < 1 || cfg.embed_dim < 1 || cfg.stem_channels < 1 || cfg.feature_channels < 1)
    throw ConfigError("queries, embed_dim and channel counts must be >= 1");
  if (cfg.stride < 2 || !std::has_single_bit(cfg.stride))
    throw ConfigError("stride must be a power of two >= 2, got " + std::to_string(cfg.stride));
  if (cfg.height == 0 || cfg.width == 0 || cfg.height % cfg.stride || cfg.width % cfg.stride)
    throw ConfigError("image size " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                      " is not divisible by stride " + std::to_string(cfg.stride));
}

namespace {

const MaskFormerConfig& checked(const MaskFormerConfig& cfg) {
  validate(cfg);
  return cfg;
}

std::size_t token_count(const MaskFormerConfig& c) { return (c.height / c.stride) * (c.width / c.stride); }

}  // namespace

ToyMaskFormer::ToyMaskFormer(const MaskFormerConfig& cfg, std::uint64_t seed)
    : cfg_(checked(cfg)),
      init_(seed),
      stem_("stem", 3, cfg.stem_channels, 3, 1, 1, true, init_),
      lateral_("decoder.lateral", cfg.feature_channels, cfg.embed_dim, 1, 1, 0, true, init_),
      skip_("decoder.skip", cfg.stem_channels, cfg.embed_dim, 1, 1, 0, true, init_),
      pixel_out_("decoder.out", cfg.embed_dim, cfg.embed_dim, 1, 1, 0, true, init_),
      pos_("transformer.pos", ag::init_uniform({token_count(cfg), cfg.feature_channels}, cfg.feature_channels, init_)),
      queries_("transformer.queries", ag::init_uniform({cfg.queries, cfg.embed_dim}, cfg.embed_dim, init_)),
      key_("transformer.key", cfg.feature_channels, cfg.embed_dim, init_),
      value_("transformer.value", cfg.feature_channels, cfg.embed_dim, init_),
      attn_out_("transformer.out", cfg.embed_dim, cfg.embed_dim, init_),
      ffn1_("transformer.ffn1", cfg.embed_dim, cfg.embed_dim, init_),
      ffn2_("transformer.ffn2", cfg.embed_dim, cfg.embed_dim, init_),
      mlp1_("mask_mlp.0", cfg.embed_dim, cfg.embed_dim, init_),
      mlp2_("mask_mlp.1", cfg.embed_dim, cfg.embed_dim, init_),
      mlp3_("mask_mlp.2", cfg.embed_dim, cfg.embed_dim, init_),
      class_head_("class_head", cfg.embed_dim, cfg.num_classes + 1, init_) {
  std::size_t in = cfg.stem_channels;
  for (std::size_t s = 1, i = 0; s < cfg.stride; s *= 2, ++i) {
    down_.emplace_back("down." + std::to_string(i), in, cfg.feature_channels, 3, 2, 1, true, init_);
    in = cfg.feature_channels;
  }
}

Var ToyMaskFormer::embed_pixels(Var stem, Var features, ag::ForwardContext& ctx) {
  Var up = upsample2d_nearest(features, cfg_.stride);
  Var e = relu(add(lateral_.forward(up, ctx), skip_.forward(stem, ctx)));
  e = pixel_out_.forward(e, ctx);
  return reshape(e, {cfg_.embed_dim, cfg_.height * cfg_.width});
}

SegmentationOutput ToyMaskFormer::forward(Var image, ag::ForwardContext& ctx) {
  return forward(image, ctx.bind(queries_), ctx);
}

SegmentationOutput ToyMaskFormer::forward(Var image, Var queries, ag::ForwardContext& ctx) {
  const Shape want{1, 3, cfg_.height, cfg_.width};
  if (image.shape() != want)
    throw DimensionError("image " + shape_str(image.shape()) + ", expected " + shape_str(want));
  if (queries.shape() != Shape{cfg_.queries, cfg_.embed_dim})
    throw DimensionError("queries " + shape_str(queries.shape()) + ", expected [" + std::to_string(cfg_.queries) +
                         ", " + std::to_string(cfg_.embed_dim) + "]");

  Var stem = relu(stem_.forward(image, ctx));
  Var f = stem;
  for (auto& d : down_) f = relu(d.forward(f, ctx));
  Var pixels = embed_pixels(stem, f, ctx);

  Var tokens = transpose(reshape(f, {cfg_.feature_channels, token_count(cfg_)}));
  tokens = add(tokens, ctx.bind(pos_));
  Var keys = key_.forward(tokens, ctx);
  Var values = value_.forward(tokens, ctx);
  Var logits = scale(matmul(queries, transpose(keys)), 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim)));
  Var h = add(queries, attn_out_.forward(matmul(softmax(logits, 1), values), ctx));
  h = add(h, ffn2_.forward(relu(ffn1_.forward(h, ctx)), ctx));

  Var emb = mlp3_.forward(relu(mlp2_.forward(relu(mlp1_.forward(h, ctx)), ctx)), ctx);
  Var probs = softmax(class_head_.forward(h, ctx), 1);
  Var masks = reshape(sigmoid(matmul(emb, pixels)), {cfg_.queries, cfg_.height, cfg_.width});
  return {probs, masks};
}

SegmentationPrediction ToyMaskFormer::predict(const Tensor& image) {
  Tape tape;
  ag::ForwardContext ctx{tape, ag::Mode::kEval, false};
  auto out = forward(tape.constant(image.reshaped({1, 3, cfg_.height, cfg_.width})), ctx);
  return {out.probs.value(), out.masks.value()};
}

LabelMap ToyMaskFormer::predict_labels(const Tensor& image, double threshold) {
  const auto p = predict(image);
  return semantic_inference(p.probs, p.masks, threshold);
}

std::vector<ag::Parameter*> ToyMaskFormer::parameters() {
  std::vector<ag::Parameter*> out;
  auto take = [&](ag::Layer& l) {
    for (auto* p : l.parameters()) out.push_back(p);
  };
  take(stem_);
  for (auto& d : down_) take(d);
  take(lateral_);
  take(skip_);
  take(pixel_out_);
  out.push_back(&pos_);
  out.push_back(&queries_);
  for (ag::Layer* l : std::initializer_list<ag::Layer*>{&key_, &value_, &attn_out_, &ffn1_, &ffn2_, &mlp1_, &mlp2_,
                                                        &mlp3_, &class_head_})
    take(*l);
  return out;
}

std::size_t ToyMaskFormer::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

std::vector<NamedTensor> ToyMaskFormer::state_dict() { return ag::make_state(parameters(), {}); }

void ToyMaskFormer::load_state_dict(const std::vector<NamedTensor>& state) {
  ag::load_state(state, parameters(), {});
}

// ---- training ------------------------------------------------------------

std::string SegTrainLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,mIoU,mean_acc\n" << std::setprecision(17);
  for (const auto& e : epochs)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.miou << ',' << e.mean_acc << '\n';
  return os.str();
}

namespace {

void require_finite(const Tensor& probs, const Tensor& masks, const std::string& where) {
  auto finite = [](const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
  };
  if (!finite(probs) || !finite(masks)) throw NumericError("model output became non-finite " + where);
}

}  // namespace

SegEvaluation evaluate_segmentation(ToyMaskFormer& model, const std::vector<SegSample>& samples,
                                    const MaskClsConfig& loss) {
  SegEvaluation out;
  const std::size_t k = model.config().num_classes;
  std::vector<double> losses(samples.size());
  out.predictions.resize(samples.size());
  metrics::parallel_for(samples.size(), [&](std::size_t i) {
    const auto p = model.predict(samples[i].image);
    require_finite(p.probs, p.masks, "on evaluation sample " + std::to_string(i));
    losses[i] = mask_cls_loss(p.probs, p.masks, segments_from_labels(samples[i].labels, k), loss);
    out.predictions[i] = semantic_inference(p.probs, p.masks);
  });
  std::vector<LabelMap> gts;
  for (const auto& s : samples) gts.push_back(s.labels);
  const auto cm = metrics::accumulate_pixel_confusion(out.predictions, gts, k);
  for (double l : losses) out.loss += l;
  if (!samples.empty()) out.loss /= static_cast<double>(samples.size());
  out.miou = metrics::mean_iou(cm).mean;
  out.mean_acc = metrics::mean_accuracy(cm).mean;
  return out;
}

SegTrainer::SegTrainer(std::vector<SegSample> train, std::vector<SegSample> val, SegTrainConfig cfg)
    : train_(std::move(train)),
      val_(std::move(val)),
      cfg_(cfg),
      model_(cfg.model, cfg.seed * 2 + 1),
      opt_(ag::AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}),
      rng_(cfg.seed) {
  if (train_.empty()) throw ArgumentError("segmentation training needs a non-empty dataset");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.lr > 0)) throw ConfigError("lr must be positive");
  const Shape want{3, cfg.model.height, cfg.model.width};
  auto check = [&](const std::vector<SegSample>& set, const char* name) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      if (set[i].image.shape() != want)
        throw ArgumentError(std::string(name) + " image " + std::to_string(i) + " has shape " +
                            shape_str(set[i].image.shape()) + ", expected " + shape_str(want));
      if (set[i].labels.height != cfg.model.height || set[i].labels.width != cfg.model.width)
        throw ArgumentError(std::string(name) + " label map " + std::to_string(i) + " has the wrong size");
    }
  };
  check(train_, "training");
  check(val_, "validation");
  for (const auto& s : train_) train_segments_.push_back(segments_from_labels(s.labels, cfg.model.num_classes));
  for (const auto& s : val_) segments_from_labels(s.labels, cfg.model.num_classes);
  order_.resize(train_.size());
}

double SegTrainer::step() {
  if (cursor_ == 0) {
    std::iota(order_.begin(), order_.end(), 0);
    shuffle(order_, rng_);
  }
  const std::size_t end = std::min(cursor_ + cfg_.batch_size, order_.size());
  const double inv = 1.0 / static_cast<double>(end - cursor_);
  const auto params = model_.parameters();
  ag::zero_grad(params);

  Tape tape;
  ag::ForwardContext ctx{tape, ag::Mode::kTrain, true};
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t b = cursor_; b < end; ++b) {
    const auto& s = train_[order_[b]];
    auto out = model_.forward(tape.constant(s.image.reshaped({1, 3, cfg_.model.height, cfg_.model.width})), ctx);
    require_finite(out.probs.value(), out.masks.value(), "at step " + std::to_string(step_));
    total = add(total, scale(mask_cls_loss(out.probs, out.masks, train_segments_[order_[b]], cfg_.loss).loss, inv));
  }
  const double loss = total.value().item();
  if (!std::isfinite(loss)) throw NumericError("segmentation loss became non-finite at step " + std::to_string(step_));
  tape.backward(total);
  ag::adam_step(params, opt_);

  ++step_;
  cursor_ = end;
  if (cursor_ == order_.size()) {
    cursor_ = 0;
    ++epoch_;
  }
  return loss;
}

void SegTrainer::set_training_data(std::vector<SegSample> train) {
  if (train.size() != train_.size())
    throw ArgumentError("replacement training set has " + std::to_string(train.size()) + " samples, expected " +
                        std::to_string(train_.size()));
  std::vector<std::vector<GtSegment>> segments;
  for (const auto& s : train) {
    if (s.image.shape() != train_[0].image.shape() || s.labels.height != cfg_.model.height ||
        s.labels.width != cfg_.model.width)
      throw ArgumentError("replacement training sample has the wrong size");
    segments.push_back(segments_from_labels(s.labels, cfg_.model.num_classes));
  }
  train_ = std::move(train);
  train_segments_ = std::move(segments);
}

bool SegTrainer::done() const {
  return epoch_ >= cfg_.epochs || (cfg_.max_steps && step_ >= cfg_.max_steps);
}

EpochRecord SegTrainer::run_epoch() {
  EpochRecord rec;
  rec.epoch = epoch_;
  double sum = 0;
  std::size_t n = 0;
  while (!done() && epoch_ == rec.epoch) {
    sum += step();
    ++n;
  }
  rec.steps = step_;
  rec.train_loss = n ? sum / static_cast<double>(n) : 0.0;
  const auto ev = evaluate_segmentation(model_, val_.empty() ? train_ : val_, cfg_.loss);
  rec.val_loss = ev.loss;
  rec.miou = ev.miou;
  rec.mean_acc = ev.mean_acc;
  if (log_.epochs.empty() || rec.val_loss < log_.epochs[log_.best_epoch].val_loss) {
    log_.best_epoch = log_.epochs.size();
    best_state_ = model_.state_dict();
  }
  log_.epochs.push_back(rec);
  return rec;
}

SegTrainLog SegTrainer::train(const std::function<void(const EpochRecord&)>& on_epoch) {
  while (!done()) {
    const auto rec = run_epoch();
    if (on_epoch) on_epoch(rec);
  }
  return log_;
}

}  // namespace roadseg::seg
