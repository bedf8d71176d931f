#include "roadseg/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace roadseg::metrics {

using det::BoundingBox;
using det::Detection;
using det::iou;

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size())
    throw DimensionError("mask_iou: sizes differ (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

std::vector<double> ConfusionMatrix::normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  const std::size_t n = dim();
  for (std::size_t r = 0; r < n; ++r) {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < n; ++c) s += at(r, c);
    if (s == 0) continue;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = static_cast<double>(at(r, c)) / static_cast<double>(s);
  }
  return out;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  if (o.num_classes != num_classes) throw DimensionError("confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
  return *this;
}

namespace {

std::size_t label_index(std::uint8_t v, std::size_t k) {
  if (v == kBackground) return k;
  if (v >= k) throw ArgumentError("label " + std::to_string(v) + " outside [0, " + std::to_string(k) + ")");
  return v;
}

void check_class(int c, std::size_t k) {
  if (c < 0 || static_cast<std::size_t>(c) >= k)
    throw ArgumentError("class id " + std::to_string(c) + " outside [0, " + std::to_string(k) + ")");
}

double mean_of_present(const std::vector<std::optional<double>>& v) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : 1.0;
}

std::vector<std::size_t> confidence_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  return order;
}

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

ConfusionMatrix pixel_confusion(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw DimensionError("label maps differ in size: " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < gt.size(); ++i) ++cm.at(label_index(gt.labels[i], k), label_index(pred.labels[i], k));
  return cm;
}

PerClass mean_iou(const ConfusionMatrix& cm) {
  PerClass out;
  const std::size_t k = cm.num_classes;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < cm.dim(); ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c), uni = row + col - tp;
    out.values.push_back(uni ? std::optional(static_cast<double>(tp) / static_cast<double>(uni)) : std::nullopt);
  }
  out.mean = mean_of_present(out.values);
  return out;
}

PerClass mean_iou(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  return mean_iou(pixel_confusion(pred, gt, k));
}

PerClass mean_accuracy(const ConfusionMatrix& cm) {
  PerClass out;
  for (std::size_t c = 0; c < cm.num_classes; ++c) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < cm.dim(); ++j) row += cm.at(c, j);
    out.values.push_back(row ? std::optional(static_cast<double>(cm.at(c, c)) / static_cast<double>(row))
                             : std::nullopt);
  }
  out.mean = mean_of_present(out.values);
  return out;
}

PerClass mean_accuracy(const LabelMap& pred, const LabelMap& gt, std::size_t k) {
  return mean_accuracy(pixel_confusion(pred, gt, k));
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  std::uint64_t correct = 0, total = 0;
  for (std::size_t c = 0; c < cm.num_classes; ++c) {
    correct += cm.at(c, c);
    for (std::size_t j = 0; j < cm.dim(); ++j) total += cm.at(c, j);
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 1.0;
}

std::vector<PrPoint> pr_curve(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                              double iou_threshold) {
  std::map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) by_image[gts[g].image_id].push_back(g);
  std::vector<bool> used(gts.size(), false);
  std::vector<PrPoint> out;
  std::size_t tp = 0;
  for (auto i : confidence_order(dets)) {
    const auto& d = dets[i];
    long best = -1;
    double best_iou = -1;
    if (auto it = by_image.find(d.image_id); it != by_image.end())
      for (auto g : it->second) {
        if (used[g]) continue;
        const double u = iou(d.box, gts[g].box);
        if (u >= iou_threshold && u > best_iou) {
          best_iou = u;
          best = static_cast<long>(g);
        }
      }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    const double n = static_cast<double>(out.size() + 1);
    out.push_back({d.confidence, static_cast<double>(tp) / n,
                   gts.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(gts.size()), best >= 0});
  }
  return out;
}

double average_precision(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, double iou_threshold) {
  if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
  const auto pr = pr_curve(dets, gts, iou_threshold);
  std::vector<double> envelope(pr.size());
  double run = 0;
  for (std::size_t i = pr.size(); i-- > 0;) envelope[i] = run = std::max(run, pr[i].precision);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    ap += (pr[i].recall - prev_recall) * envelope[i];
    prev_recall = pr[i].recall;
  }
  return ap;
}

PerClass map50(const std::vector<Detection>& dets, const std::vector<GtBox>& gts, std::size_t k) {
  std::vector<std::vector<Detection>> d(k);
  std::vector<std::vector<GtBox>> g(k);
  for (const auto& x : dets) {
    check_class(x.class_id, k);
    d[static_cast<std::size_t>(x.class_id)].push_back(x);
  }
  for (const auto& x : gts) {
    check_class(x.class_id, k);
    g[static_cast<std::size_t>(x.class_id)].push_back(x);
  }
  PerClass out;
  out.values.resize(k);
  parallel_for(k, [&](std::size_t c) {
    if (!g[c].empty()) out.values[c] = average_precision(d[c], g[c], 0.5);
  });
  out.mean = mean_of_present(out.values);
  bool any = std::any_of(out.values.begin(), out.values.end(), [](const auto& v) { return v.has_value(); });
  if (!any) out.mean = 0.0;
  return out;
}

ConfusionMatrix detection_confusion_matrix(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                           std::size_t k, double iou_threshold, double conf_floor) {
  if (!(iou_threshold > 0 && iou_threshold < 1) || !(conf_floor >= 0 && conf_floor < 1))
    throw ArgumentError("confusion matrix thresholds must lie in (0, 1)");
  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> images;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    check_class(gts[g].class_id, k);
    images[gts[g].image_id].first.push_back(g);
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    check_class(dets[i].class_id, k);
    if (dets[i].confidence > conf_floor) images[dets[i].image_id].second.push_back(i);
  }
  ConfusionMatrix cm(k);
  for (const auto& [id, members] : images) {
    const auto& [gi, di] = members;
    struct Pair {
      double iou;
      std::size_t g, d;
    };
    std::vector<Pair> pairs;
    for (std::size_t a = 0; a < gi.size(); ++a)
      for (std::size_t b = 0; b < di.size(); ++b) {
        const double u = iou(gts[gi[a]].box, dets[di[b]].box);
        if (u >= iou_threshold) pairs.push_back({u, a, b});
      }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.iou > y.iou; });
    std::vector<bool> gm(gi.size(), false), dm(di.size(), false);
    for (const auto& p : pairs) {
      if (gm[p.g] || dm[p.d]) continue;
      gm[p.g] = dm[p.d] = true;
      ++cm.at(static_cast<std::size_t>(gts[gi[p.g]].class_id), static_cast<std::size_t>(dets[di[p.d]].class_id));
    }
    for (std::size_t a = 0; a < gi.size(); ++a)
      if (!gm[a]) ++cm.at(static_cast<std::size_t>(gts[gi[a]].class_id), k);
    for (std::size_t b = 0; b < di.size(); ++b)
      if (!dm[b]) ++cm.at(k, static_cast<std::size_t>(dets[di[b]].class_id));
  }
  return cm;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("ROADSEG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

ConfusionMatrix accumulate_pixel_confusion(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                                           std::size_t k) {
  if (preds.size() != gts.size())
    throw DimensionError("got " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(gts.size()) + " ground-truth maps");
  std::vector<ConfusionMatrix> parts(preds.size(), ConfusionMatrix(k));
  parallel_for(preds.size(), [&](std::size_t i) { parts[i] = pixel_confusion(preds[i], gts[i], k); });
  ConfusionMatrix total(k);
  for (const auto& p : parts) total += p;
  return total;
}

namespace {

std::vector<std::string> labels_with_background(const std::vector<std::string>& names) {
  auto out = names;
  out.push_back("background");
  return out;
}

nlohmann::json per_class_json(const PerClass& pc, const std::vector<std::string>& names) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < pc.values.size(); ++c)
    j[names[c]] = pc.values[c] ? nlohmann::json(*pc.values[c]) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json confusion_json(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  nlohmann::json counts = nlohmann::json::array(), norm = nlohmann::json::array();
  const auto nm = cm.normalized();
  for (std::size_t r = 0; r < cm.dim(); ++r) {
    nlohmann::json cr = nlohmann::json::array(), nr = nlohmann::json::array();
    for (std::size_t c = 0; c < cm.dim(); ++c) {
      cr.push_back(cm.at(r, c));
      nr.push_back(nm[r * cm.dim() + c]);
    }
    counts.push_back(cr);
    norm.push_back(nr);
  }
  return {{"labels", labels_with_background(names)}, {"counts", counts}, {"normalized", norm}};
}

std::vector<std::string> fill_names(std::vector<std::string> names, std::size_t k) {
  for (std::size_t c = names.size(); c < k; ++c) names.push_back("class_" + std::to_string(c));
  names.resize(k);
  return names;
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["classes"] = class_names;
  if (detection) {
    j["detection"] = {{"ap50", per_class_json(detection->ap50, class_names)},
                      {"map50", detection->ap50.mean},
                      {"confusion", confusion_json(detection->confusion, class_names)}};
  }
  if (segmentation) {
    j["segmentation"] = {{"iou", per_class_json(segmentation->iou, class_names)},
                         {"mean_iou", segmentation->iou.mean},
                         {"accuracy", per_class_json(segmentation->accuracy, class_names)},
                         {"mean_accuracy", segmentation->accuracy.mean},
                         {"pixel_accuracy", segmentation->pixel_accuracy},
                         {"confusion", confusion_json(segmentation->confusion, class_names)}};
  }
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "class,ap50,iou,accuracy\n";
  auto cell = [](const std::optional<PerClass>& pc, std::size_t c) -> std::string {
    if (!pc || !pc->values[c]) return "";
    return fmt(*pc->values[c]);
  };
  std::optional<PerClass> ap, io, acc;
  if (detection) ap = detection->ap50;
  if (segmentation) {
    io = segmentation->iou;
    acc = segmentation->accuracy;
  }
  for (std::size_t c = 0; c < class_names.size(); ++c)
    os << class_names[c] << ',' << cell(ap, c) << ',' << cell(io, c) << ',' << cell(acc, c) << '\n';
  os << "mean," << (ap ? fmt(ap->mean) : "") << ',' << (io ? fmt(io->mean) : "") << ','
     << (acc ? fmt(acc->mean) : "") << '\n';
  return os.str();
}

std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                          bool normalized) {
  const auto labels = labels_with_background(fill_names(class_names, cm.num_classes));
  const auto nm = cm.normalized();
  std::ostringstream os;
  os << "truth\\pred";
  for (const auto& l : labels) os << ',' << l;
  os << '\n';
  for (std::size_t r = 0; r < cm.dim(); ++r) {
    os << labels[r];
    for (std::size_t c = 0; c < cm.dim(); ++c)
      os << ',' << (normalized ? fmt(nm[r * cm.dim() + c]) : std::to_string(cm.at(r, c)));
    os << '\n';
  }
  return os.str();
}

EvalReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                               const std::vector<std::string>& class_names, double iou_threshold,
                               double conf_floor) {
  EvalReport r;
  r.class_names = class_names;
  const std::size_t k = class_names.size();
  r.detection = DetectionReport{map50(dets, gts, k),
                                detection_confusion_matrix(dets, gts, k, iou_threshold, conf_floor)};
  return r;
}

EvalReport evaluate_masks(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                          const std::vector<std::string>& class_names) {
  EvalReport r;
  r.class_names = class_names;
  auto cm = accumulate_pixel_confusion(preds, gts, class_names.size());
  r.segmentation = SegmentationReport{mean_iou(cm), mean_accuracy(cm), pixel_accuracy(cm), cm};
  return r;
}

}  // namespace roadseg::metrics
