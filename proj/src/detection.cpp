#include "roadseg/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "roadseg/error.hpp"

namespace roadseg::det {

using ag::Tape;
using ag::Var;

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

Var col(Var m, std::size_t j) { return ag::columns(m, j, j + 1); }
Var square(Var x) { return ag::mul(x, x); }

/// x + 1 wherever x is exactly zero, so it can be used as a divisor.
Var nonzero(Var x) {
  Tensor fix(x.shape());
  for (std::size_t i = 0; i < fix.size(); ++i) fix[i] = x.value()[i] == 0.0 ? 1.0 : 0.0;
  return ag::add(x, x.tape().constant(std::move(fix)));
}

Tensor box_rows(const std::vector<BoundingBox>& boxes) {
  Tensor t({boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t[i * 4 + 0] = boxes[i].x1;
    t[i * 4 + 1] = boxes[i].y1;
    t[i * 4 + 2] = boxes[i].x2;
    t[i * 4 + 3] = boxes[i].y2;
  }
  return t;
}

void check_dfl_target(double t, std::size_t reg_max) {
  if (!(t >= 0.0 && t <= static_cast<double>(reg_max)))
    throw ArgumentError("dfl target " + std::to_string(t) + " outside [0, " + std::to_string(reg_max) + "]");
}

}  // namespace

Var ciou_loss(Var pred, Var target) {
  if (pred.value().rank() != 2 || pred.value().dim(1) != 4 || pred.shape() != target.shape())
    throw DimensionError("ciou_loss: expected matching [N,4] boxes, got " + shape_str(pred.shape()) +
                         " and " + shape_str(target.shape()));
  Tape& t = pred.tape();
  const std::size_t n = pred.value().dim(0);
  Var px1 = col(pred, 0), py1 = col(pred, 1), px2 = col(pred, 2), py2 = col(pred, 3);
  Var gx1 = col(target, 0), gy1 = col(target, 1), gx2 = col(target, 2), gy2 = col(target, 3);

  Var pw = ag::sub(px2, px1), ph = ag::sub(py2, py1);
  Var gw = ag::sub(gx2, gx1), gh = ag::sub(gy2, gy1);
  Var iw = ag::relu(ag::sub(ag::minimum(px2, gx2), ag::maximum(px1, gx1)));
  Var ih = ag::relu(ag::sub(ag::minimum(py2, gy2), ag::maximum(py1, gy1)));
  Var inter = ag::mul(iw, ih);
  Var uni = ag::sub(ag::add(ag::mul(pw, ph), ag::mul(gw, gh)), inter);
  Var overlap = ag::div(inter, nonzero(uni));

  Var cw = ag::sub(ag::maximum(px2, gx2), ag::minimum(px1, gx1));
  Var ch = ag::sub(ag::maximum(py2, gy2), ag::minimum(py1, gy1));
  Var c2 = ag::add(square(cw), square(ch));
  Var dx = ag::scale(ag::sub(ag::add(px1, px2), ag::add(gx1, gx2)), 0.5);
  Var dy = ag::scale(ag::sub(ag::add(py1, py2), ag::add(gy1, gy2)), 0.5);
  Var rho2 = ag::add(square(dx), square(dy));

  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  Var v = ag::scale(square(ag::sub(ag::atan(ag::div(gw, nonzero(gh))), ag::atan(ag::div(pw, nonzero(ph))))), k);
  Var one_minus_iou = ag::add_scalar(ag::neg(overlap), 1.0);
  Var alpha = ag::div(v, nonzero(ag::add(one_minus_iou, v)));

  Var loss = ag::add(ag::add(one_minus_iou, ag::div(rho2, nonzero(c2))), ag::mul(alpha, v));
  Tensor keep({n, 1});
  for (std::size_t i = 0; i < n; ++i) keep[i] = c2.value()[i] > 0.0 ? 1.0 : 0.0;
  return ag::reshape(ag::mul(loss, t.constant(std::move(keep))), {n});
}

double ciou_loss(const BoundingBox& pred, const BoundingBox& target) {
  Tape t;
  return ciou_loss(t.constant(box_rows({pred})), t.constant(box_rows({target}))).value().item();
}

double dfl_loss(std::span<const double> dist, double target) {
  if (dist.size() < 2) throw ArgumentError("dfl_loss: need at least two bins");
  const std::size_t reg_max = dist.size() - 1;
  check_dfl_target(target, reg_max);
  const double lo = std::floor(target);
  const auto il = static_cast<std::size_t>(lo);
  if (lo == target) return -std::log(dist[il]);
  return -((lo + 1 - target) * std::log(dist[il]) + (target - lo) * std::log(dist[il + 1]));
}

Var dfl_loss(Var probs, const std::vector<double>& targets) {
  const Tensor& p = probs.value();
  if (p.rank() != 2 || p.dim(0) != targets.size() || p.dim(1) < 2)
    throw DimensionError("dfl_loss: probs " + shape_str(p.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  const std::size_t n = p.dim(0), bins = p.dim(1);
  std::vector<std::size_t> idx(2 * n);
  Tensor w({2 * n});
  for (std::size_t i = 0; i < n; ++i) {
    const double t = targets[i];
    check_dfl_target(t, bins - 1);
    const double lo = std::floor(t);
    const auto il = static_cast<std::size_t>(lo);
    if (lo == t) {
      idx[2 * i] = idx[2 * i + 1] = i * bins + il;
      w[2 * i] = w[2 * i + 1] = 0.5;
    } else {
      idx[2 * i] = i * bins + il;
      idx[2 * i + 1] = i * bins + il + 1;
      w[2 * i] = lo + 1 - t;
      w[2 * i + 1] = t - lo;
    }
  }
  Tape& tape = probs.tape();
  Var terms = ag::mul(ag::log(ag::gather(probs, std::move(idx))), tape.constant(std::move(w)));
  Var rows = ag::matmul(ag::reshape(terms, {n, 2}), tape.constant(Tensor({2, 1}, 1.0)));
  return ag::neg(ag::reshape(rows, {n}));
}

double HeadLayout::center_x(std::size_t cell) const {
  return (static_cast<double>(cell % grid_w) + 0.5) * static_cast<double>(stride);
}

double HeadLayout::center_y(std::size_t cell) const {
  return (static_cast<double>(cell / grid_w) + 0.5) * static_cast<double>(stride);
}

DecodedVars decode_boxes(Var pred, const HeadLayout& layout) {
  const std::size_t cells = layout.cells(), bins = layout.bins(), k = layout.num_classes;
  if (pred.shape() != Shape{cells, layout.channels()})
    throw DimensionError("decode_boxes: prediction " + shape_str(pred.shape()) + " does not match layout " +
                         shape_str({cells, layout.channels()}));
  Tape& t = pred.tape();
  Var probs = ag::softmax(ag::reshape(ag::columns(pred, 0, 4 * bins), {cells * 4, bins}), 1);
  Tensor bin_values({bins, 1});
  for (std::size_t i = 0; i < bins; ++i) bin_values[i] = static_cast<double>(i);
  Var offsets = ag::reshape(ag::matmul(probs, t.constant(std::move(bin_values))), {cells, 4});

  const double s = static_cast<double>(layout.stride);
  Tensor centers({cells, 4}), signs({cells, 4});
  for (std::size_t c = 0; c < cells; ++c) {
    const double cx = layout.center_x(c), cy = layout.center_y(c);
    centers[c * 4 + 0] = cx;
    centers[c * 4 + 1] = cy;
    centers[c * 4 + 2] = cx;
    centers[c * 4 + 3] = cy;
    signs[c * 4 + 0] = signs[c * 4 + 1] = -s;
    signs[c * 4 + 2] = signs[c * 4 + 3] = s;
  }
  Var boxes = ag::add(t.constant(std::move(centers)), ag::mul(offsets, t.constant(std::move(signs))));
  Var scores = ag::sigmoid(ag::columns(pred, 4 * bins, 4 * bins + k));
  return {boxes, scores, probs};
}

namespace {

std::vector<DecodedCell> to_cells(const Tensor& boxes, const Tensor& scores, std::size_t k) {
  std::vector<DecodedCell> out(boxes.dim(0));
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c].box = {boxes[c * 4], boxes[c * 4 + 1], boxes[c * 4 + 2], boxes[c * 4 + 3]};
    out[c].scores.assign(scores.data().begin() + static_cast<long>(c * k),
                         scores.data().begin() + static_cast<long>((c + 1) * k));
  }
  return out;
}

}  // namespace

std::vector<DecodedCell> decode_boxes(const Tensor& pred, const HeadLayout& layout) {
  Tape t;
  auto d = decode_boxes(t.constant(pred), layout);
  return to_cells(d.boxes.value(), d.scores.value(), layout.num_classes);
}

std::vector<std::size_t> Assignment::cells_of(int gt) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < gt_of_cell.size(); ++c)
    if (gt_of_cell[c] == gt) out.push_back(c);
  return out;
}

Assignment task_aligned_assign(const std::vector<DecodedCell>& cells, const HeadLayout& layout,
                               const std::vector<GroundTruth>& gts, const AssignParams& params) {
  if (!(params.alpha > 0) || !(params.beta > 0) || params.topk < 1)
    throw ArgumentError("task_aligned_assign: alpha, beta must be > 0 and topk >= 1");
  const std::size_t n = cells.size();
  Assignment a;
  a.gt_of_cell.assign(n, -1);
  a.align.assign(n, 0.0);
  a.overlap.assign(n, 0.0);

  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto& gt = gts[g];
    if (gt.class_id < 0 || static_cast<std::size_t>(gt.class_id) >= layout.num_classes)
      throw ArgumentError("ground truth class " + std::to_string(gt.class_id) + " outside [0, " +
                          std::to_string(layout.num_classes) + ")");
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t c = 0; c < n; ++c) {
      const double cx = layout.center_x(c), cy = layout.center_y(c);
      if (!(cx > gt.box.x1 && cx < gt.box.x2 && cy > gt.box.y1 && cy < gt.box.y2)) continue;
      const double u = iou(cells[c].box, gt.box);
      const double s = cells[c].scores.at(static_cast<std::size_t>(gt.class_id));
      cand.emplace_back(std::pow(s, params.alpha) * std::pow(u, params.beta), c);
    }
    const std::size_t k = std::min(params.topk, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(k), cand.end(),
                      [](const auto& x, const auto& y) { return x.first > y.first || (x.first == y.first && x.second < y.second); });
    for (std::size_t i = 0; i < k; ++i) {
      const auto [t, c] = cand[i];
      if (a.gt_of_cell[c] < 0 || t > a.align[c]) {
        a.gt_of_cell[c] = static_cast<int>(g);
        a.align[c] = t;
        a.overlap[c] = iou(cells[c].box, gt.box);
      }
    }
  }
  return a;
}

Tensor classification_targets(const Assignment& a, const std::vector<GroundTruth>& gts,
                               const HeadLayout& layout) {
  Tensor out({a.gt_of_cell.size(), layout.num_classes});
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto pos = a.cells_of(static_cast<int>(g));
    double max_t = 0, max_u = 0;
    for (auto c : pos) {
      max_t = std::max(max_t, a.align[c]);
      max_u = std::max(max_u, a.overlap[c]);
    }
    if (max_t <= 0) continue;
    for (auto c : pos)
      out[c * layout.num_classes + static_cast<std::size_t>(gts[g].class_id)] = a.align[c] * max_u / max_t;
  }
  return out;
}

DetectionLoss detection_loss(Var pred, const HeadLayout& layout, const std::vector<GroundTruth>& gts,
                             const LossWeights& weights, const AssignParams& params) {
  Tape& t = pred.tape();
  auto d = decode_boxes(pred, layout);
  const auto cells = to_cells(d.boxes.value(), d.scores.value(), layout.num_classes);
  const auto a = task_aligned_assign(cells, layout, gts, params);

  DetectionLoss out;
  Var cls = ag::bce_loss(d.scores, classification_targets(a, gts, layout));
  out.cls = cls.value().item();
  out.total = ag::scale(cls, weights.cls);

  std::vector<std::size_t> pos;
  for (std::size_t c = 0; c < cells.size(); ++c)
    if (a.gt_of_cell[c] >= 0) pos.push_back(c);
  out.positives = pos.size();
  if (pos.empty()) return out;

  const std::size_t p = pos.size(), bins = layout.bins();
  const double stride = static_cast<double>(layout.stride), reg_max = static_cast<double>(layout.reg_max);
  std::vector<std::size_t> box_idx, prob_idx;
  std::vector<BoundingBox> targets;
  std::vector<double> side_targets;
  for (auto c : pos) {
    const auto& gt = gts[static_cast<std::size_t>(a.gt_of_cell[c])].box;
    targets.push_back(gt);
    const double cx = layout.center_x(c), cy = layout.center_y(c);
    const double sides[4] = {cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy};
    for (std::size_t j = 0; j < 4; ++j) {
      box_idx.push_back(c * 4 + j);
      side_targets.push_back(std::clamp(sides[j] / stride, 0.0, reg_max));
      for (std::size_t b = 0; b < bins; ++b) prob_idx.push_back((c * 4 + j) * bins + b);
    }
  }
  Var pb = ag::reshape(ag::gather(d.boxes, std::move(box_idx)), {p, 4});
  Var box = ag::mean(ciou_loss(pb, t.constant(box_rows(targets))));
  Var probs = ag::reshape(ag::gather(d.probs, std::move(prob_idx)), {4 * p, bins});
  Var dfl = ag::mean(dfl_loss(probs, side_targets));
  out.box = box.value().item();
  out.dfl = dfl.value().item();
  out.total = ag::add(out.total, ag::add(ag::scale(box, weights.box), ag::scale(dfl, weights.dfl)));
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold < 1))
    throw ArgumentError("nms: iou threshold must be in (0, 1)");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<Detection> kept;
  for (auto i : order) {
    const auto& d = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> postprocess(const std::vector<DecodedCell>& cells, const std::string& image_id,
                                   double conf_floor, double iou_threshold) {
  std::vector<Detection> dets;
  for (const auto& c : cells) {
    if (c.scores.empty()) continue;
    const auto best = std::max_element(c.scores.begin(), c.scores.end());
    if (*best <= conf_floor) continue;
    dets.push_back({c.box, static_cast<int>(best - c.scores.begin()), *best, image_id});
  }
  return nms(dets, iou_threshold);
}

void write_detections_csv(std::ostream& os, const std::vector<Detection>& dets) {
  os << "image_id,class_id,x1,y1,x2,y2,confidence\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& d : dets)
    os << d.image_id << ',' << d.class_id << ',' << d.box.x1 << ',' << d.box.y1 << ',' << d.box.x2 << ','
       << d.box.y2 << ',' << d.confidence << '\n';
}

std::vector<Detection> read_detections_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("detections csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "image_id,class_id,x1,y1,x2,y2,confidence")
    throw DataError("detections csv: unexpected header '" + line + "'");
  std::vector<Detection> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7)
      throw DataError("detections csv line " + std::to_string(lineno) + ": expected 7 fields, got " +
                      std::to_string(f.size()));
    try {
      Detection d;
      d.image_id = f[0];
      d.class_id = std::stoi(f[1]);
      d.box = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
      d.confidence = std::stod(f[6]);
      if (!d.box.valid()) throw DataError("box corners out of order");
      if (!(d.confidence >= 0 && d.confidence <= 1)) throw DataError("confidence outside [0,1]");
      out.push_back(std::move(d));
    } catch (const std::logic_error& e) {
      throw DataError("detections csv line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("detections csv line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_detections_csv(const std::filesystem::path& path, const std::vector<Detection>& dets) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  write_detections_csv(f, dets);
}

std::vector<Detection> load_detections_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  return read_detections_csv(f);
}

}  // namespace roadseg::det
