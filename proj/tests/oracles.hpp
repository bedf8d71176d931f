#pragma once

// Independent plain-double references shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "roadseg/data.hpp"
#include "roadseg/detection.hpp"
#include "roadseg/metrics.hpp"
#include "roadseg/random.hpp"
#include "roadseg/segmentation.hpp"

namespace roadseg::oracle {

using det::BoundingBox;
using det::Detection;
using metrics::ConfusionMatrix;
using metrics::GtBox;

// ---- segmentation ------------------------------------------------------------

inline double ref_mask_loss(const std::vector<double>& p, const std::vector<std::uint8_t>& g, double wb = 1,
                            double wd = 1) {
  double bce = 0, inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::min(std::max(p[i], 1e-7), 1 - 1e-7);
    bce += g[i] ? -std::log(q) : -std::log(1 - q);
    inter += p[i] * g[i];
    ps += p[i];
    gs += g[i];
  }
  const double dice = (ps + gs) == 0 ? 0 : 1 - 2 * inter / (ps + gs);
  return wb * bce / static_cast<double>(p.size()) + wd * dice;
}

struct BruteMatch {
  std::vector<std::size_t> sigma;
  double cost = 0;
};

// Enumerates injective maps in lexicographic order; keeps the first strict minimum.
inline BruteMatch brute_force_match(const std::vector<std::vector<double>>& c, std::size_t cols) {
  BruteMatch best;
  best.cost = INFINITY;
  std::vector<std::size_t> cur;
  std::vector<bool> used(cols, false);
  std::function<void()> rec = [&] {
    if (cur.size() == c.size()) {
      double s = 0;
      for (std::size_t j = 0; j < cur.size(); ++j) s += c[j][cur[j]];
      if (s < best.cost) best = {cur, s};
      return;
    }
    for (std::size_t k = 0; k < cols; ++k) {
      if (used[k]) continue;
      used[k] = true;
      cur.push_back(k);
      rec();
      cur.pop_back();
      used[k] = false;
    }
  };
  rec();
  return best;
}

inline Tensor cost_tensor(const std::vector<std::vector<double>>& c, std::size_t cols) {
  Tensor t({c.size(), cols});
  for (std::size_t j = 0; j < c.size(); ++j)
    for (std::size_t k = 0; k < cols; ++k) t[j * cols + k] = c[j][k];
  return t;
}

struct SegFixture {
  Tensor probs;  // [N, K+1]
  Tensor masks;  // [N, H, W]
  std::vector<seg::GtSegment> gts;
};

inline SegFixture random_fixture(Rng& rng, std::size_t n, std::size_t ngt, std::size_t k, std::size_t h,
                                 std::size_t w) {
  SegFixture f{Tensor({n, k + 1}), Tensor({n, h, w}), {}};
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c <= k; ++c) s += f.probs[i * (k + 1) + c] = 0.05 + uniform01(rng);
    for (std::size_t c = 0; c <= k; ++c) f.probs[i * (k + 1) + c] /= s;
  }
  for (auto& v : f.masks.data()) v = uniform(rng, 0.01, 0.99);
  for (std::size_t j = 0; j < ngt; ++j) {
    seg::GtSegment g{static_cast<int>(uniform_index(rng, k)), std::vector<std::uint8_t>(h * w)};
    for (auto& b : g.mask) b = uniform01(rng) < 0.4;
    f.gts.push_back(std::move(g));
  }
  return f;
}

// Brute force over all injective assignments: the matching-cost minimizer and its loss.
inline std::pair<std::vector<std::size_t>, double> ref_mask_cls(const SegFixture& f,
                                                                double w_empty = seg::kNoObjectWeight) {
  const std::size_t n = f.probs.dim(0), k1 = f.probs.dim(1), hw = f.masks.size() / n;
  auto mask_of = [&](std::size_t i) {
    return std::vector<double>(f.masks.values().begin() + static_cast<long>(i * hw),
                               f.masks.values().begin() + static_cast<long>((i + 1) * hw));
  };
  auto prob = [&](std::size_t i, int cls) { return f.probs[i * k1 + static_cast<std::size_t>(cls)]; };
  std::vector<std::vector<double>> cost(f.gts.size(), std::vector<double>(n));
  for (std::size_t j = 0; j < f.gts.size(); ++j)
    for (std::size_t i = 0; i < n; ++i)
      cost[j][i] = -prob(i, f.gts[j].class_id) + ref_mask_loss(mask_of(i), f.gts[j].mask);
  const auto m = brute_force_match(cost, n);
  double loss = 0;
  std::vector<bool> used(n, false);
  for (std::size_t j = 0; j < f.gts.size(); ++j) {
    const std::size_t i = m.sigma[j];
    used[i] = true;
    loss += -std::log(prob(i, f.gts[j].class_id)) + ref_mask_loss(mask_of(i), f.gts[j].mask);
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) loss += w_empty * -std::log(f.probs[i * k1 + k1 - 1]);
  return {m.sigma, loss};
}

// ---- detection -------------------------------------------------------------

inline Detection make_det(BoundingBox b, double conf, int cls = 0, std::string img = "a") {
  return Detection{b, cls, conf, std::move(img)};
}

inline GtBox make_gt(BoundingBox b, int cls = 0, std::string img = "a") { return GtBox{std::move(img), b, cls}; }

inline double ref_box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double i = w * h;
  const double u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i;
  return u > 0 ? i / u : 0.0;
}

// TP flags in confidence order, then AP as the sum over distinct recall levels
// of the recall step times the best precision reachable at that recall or beyond.
inline double ref_ap(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, double thr) {
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) {
    return dets[a].confidence != dets[b].confidence ? dets[a].confidence > dets[b].confidence : a < b;
  });
  std::vector<bool> taken(gts.size());
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t n = 0; n < order.size(); ++n) {
    const auto& d = dets[order[n]];
    int best = -1;
    double bi = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].image_id != d.image_id) continue;
      const double u = ref_box_iou(d.box, gts[g].box);
      if (u >= thr && (best < 0 || u > bi)) {
        best = static_cast<int>(g);
        bi = u;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(n + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  std::set<double> levels(rec.begin(), rec.end());
  double ap = 0, prev = 0;
  for (double r : levels) {
    if (r == 0) continue;
    double pmax = 0;
    for (std::size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= r) pmax = std::max(pmax, prec[i]);
    ap += (r - prev) * pmax;
    prev = r;
  }
  return ap;
}

// Repeatedly takes the highest-IoU unmatched pair of the same image.
inline ConfusionMatrix ref_confusion(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                     std::size_t k, double thr, double floor) {
  ConfusionMatrix cm(k);
  std::vector<bool> gm(gts.size()), dm(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) dm[i] = !(dets[i].confidence > floor);
  while (true) {
    double best = -1;
    std::size_t bg = 0, bd = 0;
    for (std::size_t g = 0; g < gts.size(); ++g)
      for (std::size_t d = 0; d < dets.size(); ++d) {
        if (gm[g] || dm[d] || gts[g].image_id != dets[d].image_id) continue;
        const double u = ref_box_iou(gts[g].box, dets[d].box);
        if (u >= thr && u > best) {
          best = u;
          bg = g;
          bd = d;
        }
      }
    if (best < 0) break;
    gm[bg] = dm[bd] = true;
    ++cm.at(static_cast<std::size_t>(gts[bg].class_id), static_cast<std::size_t>(dets[bd].class_id));
  }
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (!gm[g]) ++cm.at(static_cast<std::size_t>(gts[g].class_id), k);
  for (std::size_t d = 0; d < dets.size(); ++d)
    if (!dm[d]) ++cm.at(k, static_cast<std::size_t>(dets[d].class_id));
  return cm;
}

struct RandomSet {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

// Gts on a few images; detections are jittered copies of gts or free boxes.
inline RandomSet random_set(std::mt19937_64& rng, int classes, std::size_t max_dets, std::size_t max_gts) {
  std::uniform_real_distribution<double> u01(0, 1);
  auto box = [&] {
    const double x = 100 * u01(rng), y = 100 * u01(rng);
    return BoundingBox{x, y, x + 5 + 30 * u01(rng), y + 5 + 30 * u01(rng)};
  };
  const char* images[] = {"a", "b", "c"};
  RandomSet s;
  const auto ng = std::uniform_int_distribution<std::size_t>(0, max_gts)(rng);
  const auto nd = std::uniform_int_distribution<std::size_t>(0, max_dets)(rng);
  for (std::size_t i = 0; i < ng; ++i)
    s.gts.push_back(make_gt(box(), static_cast<int>(rng() % classes), images[rng() % 3]));
  for (std::size_t i = 0; i < nd; ++i) {
    if (!s.gts.empty() && u01(rng) < 0.7) {
      const auto& g = s.gts[rng() % s.gts.size()];
      const double j = 6 * (u01(rng) - 0.5), k = 6 * (u01(rng) - 0.5);
      const BoundingBox b{g.box.x1 + j, g.box.y1 + k, g.box.x2 + j + 2 * u01(rng), g.box.y2 + k};
      const int cls = u01(rng) < 0.8 ? g.class_id : static_cast<int>(rng() % classes);
      s.dets.push_back(make_det(b, u01(rng), cls, g.image_id));
    } else {
      s.dets.push_back(make_det(box(), u01(rng), static_cast<int>(rng() % classes), images[rng() % 3]));
    }
  }
  return s;
}

// O(n^2): repeatedly extract the most confident survivor.
inline std::vector<Detection> ref_nms(std::vector<Detection> dets, double thr) {
  std::vector<Detection> kept;
  std::vector<std::size_t> idx(dets.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  while (!idx.empty()) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < idx.size(); ++j)
      if (dets[idx[j]].confidence > dets[idx[best]].confidence) best = j;
    const Detection top = dets[idx[best]];
    kept.push_back(top);
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      if (j == best) continue;
      const auto& d = dets[idx[j]];
      if (d.class_id == top.class_id && ref_box_iou(d.box, top.box) > thr) continue;
      rest.push_back(idx[j]);
    }
    idx = rest;
  }
  return kept;
}

inline std::vector<Detection> random_dets(std::mt19937_64& rng, std::size_t n, int classes) {
  std::uniform_real_distribution<double> pos(0, 80), size(5, 40), conf(0, 1);
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    out.push_back({{x, y, x + size(rng), y + size(rng)}, cls(rng), conf(rng), "img"});
  }
  return out;
}

// ---- geometry ---------------------------------------------------------------

// Sign-of-cross-product containment for a triangle.
inline bool ref_in_triangle(const std::vector<data::Point>& t, double x, double y) {
  auto cross = [&](const data::Point& a, const data::Point& b) {
    return (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
  };
  const double c0 = cross(t[0], t[1]), c1 = cross(t[1], t[2]), c2 = cross(t[2], t[0]);
  return (c0 > 0 && c1 > 0 && c2 > 0) || (c0 < 0 && c1 < 0 && c2 < 0);
}

}  // namespace roadseg::oracle
