#include "roadseg/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "roadseg/tensor.hpp"
#include "oracles.hpp"

namespace roadseg::metrics {
namespace {

using det::BoundingBox;
using det::Detection;
using oracle::make_det;
using oracle::make_gt;
using oracle::random_set;
using oracle::ref_ap;
using oracle::ref_confusion;

LabelMap random_map(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t k) {
  LabelMap m(h, w);
  std::uniform_int_distribution<int> d(0, static_cast<int>(k));
  for (auto& v : m.labels) {
    const int x = d(rng);
    v = x == static_cast<int>(k) ? kBackground : static_cast<std::uint8_t>(x);
  }
  return m;
}

// ---- mask IoU --------------------------------------------------------------

TEST(MaskIou, Fixtures) {
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 1, 1, 0}, c{0, 0, 1, 1}, z(4, 0);
  EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(a, c), 0.0);
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mask_iou(z, z), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(z, a), 0.0);
}

TEST(MaskIou, SizeMismatchThrows) {
  const std::vector<std::uint8_t> a(4, 1), b(5, 1);
  EXPECT_THROW(mask_iou(a, b), DimensionError);
}

// ---- pixel metrics ---------------------------------------------------------

TEST(PixelMetrics, IdenticalMapsScoreOne) {
  std::mt19937_64 rng(3);
  const auto m = random_map(rng, 9, 7, 4);
  const auto io = mean_iou(m, m, 4);
  const auto acc = mean_accuracy(m, m, 4);
  EXPECT_DOUBLE_EQ(io.mean, 1.0);
  EXPECT_DOUBLE_EQ(acc.mean, 1.0);
  for (const auto& v : io.values) EXPECT_EQ(v, 1.0);
}

TEST(PixelMetrics, AbsentClassExcluded) {
  LabelMap gt(2, 2), pred(2, 2);
  gt.labels = {0, 0, 1, kBackground};
  pred.labels = {0, 1, 1, kBackground};
  const auto io = mean_iou(pred, gt, 3);
  ASSERT_EQ(io.values.size(), 3u);
  EXPECT_DOUBLE_EQ(*io.values[0], 0.5);
  EXPECT_DOUBLE_EQ(*io.values[1], 0.5);
  EXPECT_FALSE(io.values[2].has_value());
  EXPECT_DOUBLE_EQ(io.mean, 0.5);
  const auto acc = mean_accuracy(pred, gt, 3);
  EXPECT_DOUBLE_EQ(*acc.values[0], 0.5);
  EXPECT_DOUBLE_EQ(*acc.values[1], 1.0);
  EXPECT_FALSE(acc.values[2].has_value());
  EXPECT_DOUBLE_EQ(acc.mean, 0.75);
}

TEST(PixelMetrics, AllBackgroundPredictionScoresZero) {
  std::mt19937_64 rng(5);
  const auto gt = random_map(rng, 8, 8, 4);
  const LabelMap pred(8, 8);
  const auto acc = mean_accuracy(pred, gt, 4);
  for (const auto& v : acc.values) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(acc.mean, 0.0);
  EXPECT_DOUBLE_EQ(mean_iou(pred, gt, 4).mean, 0.0);
}

TEST(PixelMetrics, MatchesCountingOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 4;
    const auto gt = random_map(rng, 13, 11, k), pred = random_map(rng, 13, 11, k);
    const auto io = mean_iou(pred, gt, k);
    const auto acc = mean_accuracy(pred, gt, k);
    double iou_sum = 0, acc_sum = 0;
    int iou_n = 0, acc_n = 0;
    for (std::size_t c = 0; c < k; ++c) {
      int inter = 0, uni = 0, in_gt = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool p = pred.labels[i] == c, g = gt.labels[i] == c;
        inter += p && g;
        uni += p || g;
        in_gt += g;
      }
      if (uni) {
        EXPECT_DOUBLE_EQ(*io.values[c], double(inter) / uni);
        iou_sum += double(inter) / uni;
        ++iou_n;
      }
      if (in_gt) {
        EXPECT_DOUBLE_EQ(*acc.values[c], double(inter) / in_gt);
        acc_sum += double(inter) / in_gt;
        ++acc_n;
      }
    }
    EXPECT_NEAR(io.mean, iou_sum / iou_n, 1e-15);
    EXPECT_NEAR(acc.mean, acc_sum / acc_n, 1e-15);
  }
}

TEST(PixelMetrics, PixelAccuracyIgnoresBackgroundTruth) {
  LabelMap gt(1, 4), pred(1, 4);
  gt.labels = {0, 1, 1, kBackground};
  pred.labels = {0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(pixel_accuracy(pixel_confusion(pred, gt, 2)), 2.0 / 3.0);
}

TEST(PixelMetrics, BadLabelOrShapeThrows) {
  LabelMap a(2, 2, 0), b(2, 2, 0), c(3, 2, 0);
  b.labels[1] = 7;
  EXPECT_THROW(pixel_confusion(a, b, 4), ArgumentError);
  EXPECT_THROW(pixel_confusion(a, c, 4), DimensionError);
}

TEST(PixelMetrics, ParallelAccumulationIsDeterministic) {
  std::mt19937_64 rng(17);
  std::vector<LabelMap> preds, gts;
  ConfusionMatrix serial(3);
  for (int i = 0; i < 12; ++i) {
    preds.push_back(random_map(rng, 6, 5, 3));
    gts.push_back(random_map(rng, 6, 5, 3));
    serial += pixel_confusion(preds.back(), gts.back(), 3);
  }
  for (const char* n : {"1", "3", "8"}) {
    ::setenv("ROADSEG_THREADS", n, 1);
    EXPECT_EQ(accumulate_pixel_confusion(preds, gts, 3), serial) << n;
  }
  ::unsetenv("ROADSEG_THREADS");
}

TEST(ParallelFor, PropagatesExceptions) {
  ::setenv("ROADSEG_THREADS", "4", 1);
  EXPECT_EQ(worker_count(), 4u);
  EXPECT_THROW(parallel_for(10,
                            [](std::size_t i) {
                              if (i == 7) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
  ::setenv("ROADSEG_THREADS", "zero", 1);
  EXPECT_GE(worker_count(), 1u);
  ::unsetenv("ROADSEG_THREADS");
}

// ---- average precision -----------------------------------------------------

TEST(AveragePrecision, SingleMatch) {
  EXPECT_DOUBLE_EQ(average_precision({make_det({0, 0, 10, 10}, 0.9)}, {make_gt({0, 0, 10, 10})}), 1.0);
}

TEST(AveragePrecision, TpFpTpFixture) {
  const std::vector<GtBox> gts{make_gt({0, 0, 10, 10}), make_gt({20, 20, 30, 30})};
  const std::vector<Detection> dets{make_det({0, 0, 10, 10}, 0.9), make_det({50, 50, 60, 60}, 0.8),
                                    make_det({20, 20, 30, 30}, 0.7)};
  const auto pr = pr_curve(dets, gts);
  ASSERT_EQ(pr.size(), 3u);
  EXPECT_DOUBLE_EQ(pr[0].recall, 0.5);
  EXPECT_DOUBLE_EQ(pr[1].recall, 0.5);
  EXPECT_DOUBLE_EQ(pr[2].recall, 1.0);
  EXPECT_DOUBLE_EQ(pr[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(pr[2].precision, 2.0 / 3.0);
  EXPECT_NEAR(average_precision(dets, gts), 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(average_precision(dets, gts), 0.8333, 5e-5);
}

TEST(AveragePrecision, DuplicateIsFalsePositive) {
  const std::vector<Detection> dets{make_det({0, 0, 10, 10}, 0.9), make_det({0, 0, 10, 10}, 0.8)};
  const auto pr = pr_curve(dets, {make_gt({0, 0, 10, 10})});
  EXPECT_TRUE(pr[0].true_positive);
  EXPECT_FALSE(pr[1].true_positive);
  EXPECT_DOUBLE_EQ(average_precision(dets, {make_gt({0, 0, 10, 10})}), 1.0);
}

TEST(AveragePrecision, OtherImageDoesNotMatch) {
  EXPECT_DOUBLE_EQ(average_precision({make_det({0, 0, 10, 10}, 0.9, 0, "b")}, {make_gt({0, 0, 10, 10})}), 0.0);
}

TEST(AveragePrecision, EmptyGroundTruthConventions) {
  EXPECT_DOUBLE_EQ(average_precision({}, {}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({make_det({0, 0, 1, 1}, 0.5)}, {}), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({}, {make_gt({0, 0, 1, 1})}), 0.0);
}

TEST(AveragePrecision, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_set(rng, 1, 20, 10);
    const double ap = average_precision(s.dets, s.gts);
    EXPECT_NEAR(ap, ref_ap(s.dets, s.gts, 0.5), 1e-9) << "trial " << trial;
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneConfidenceMap) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = random_set(rng, 1, 20, 10);
    const double before = average_precision(s.dets, s.gts);
    for (auto& d : s.dets) d.confidence = std::exp(5 * d.confidence) - 3;
    EXPECT_DOUBLE_EQ(average_precision(s.dets, s.gts), before);
  }
}

// ---- mAP50 -----------------------------------------------------------------

TEST(Map50, PerfectAndHalf) {
  const std::vector<GtBox> gts{make_gt({0, 0, 10, 10}, 0), make_gt({20, 20, 30, 30}, 1)};
  std::vector<Detection> dets{make_det({0, 0, 10, 10}, 0.9, 0), make_det({20, 20, 30, 30}, 0.9, 1)};
  EXPECT_DOUBLE_EQ(map50(dets, gts, 3).mean, 1.0);
  EXPECT_FALSE(map50(dets, gts, 3).values[2].has_value());
  dets[1].box = {60, 60, 70, 70};
  const auto m = map50(dets, gts, 3);
  EXPECT_DOUBLE_EQ(*m.values[0], 1.0);
  EXPECT_DOUBLE_EQ(*m.values[1], 0.0);
  EXPECT_DOUBLE_EQ(m.mean, 0.5);
}

TEST(Map50, MixedMatchesOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const auto s = random_set(rng, 3, 20, 10);
    const auto m = map50(s.dets, s.gts, 3);
    double sum = 0;
    int n = 0;
    for (int c = 0; c < 3; ++c) {
      std::vector<Detection> d;
      std::vector<GtBox> g;
      for (const auto& x : s.dets)
        if (x.class_id == c) d.push_back(x);
      for (const auto& x : s.gts)
        if (x.class_id == c) g.push_back(x);
      if (g.empty()) {
        EXPECT_FALSE(m.values[static_cast<std::size_t>(c)].has_value());
        continue;
      }
      const double ref = ref_ap(d, g, 0.5);
      EXPECT_NEAR(*m.values[static_cast<std::size_t>(c)], ref, 1e-9);
      sum += ref;
      ++n;
    }
    if (n) EXPECT_NEAR(m.mean, sum / n, 1e-9);
  }
}

TEST(Map50, BadClassThrows) {
  EXPECT_THROW(map50({make_det({0, 0, 1, 1}, 0.9, 5)}, {}, 2), ArgumentError);
}

// ---- detection confusion ---------------------------------------------------

TEST(DetectionConfusion, PerfectIsIdentityBlock) {
  const std::vector<GtBox> gts{make_gt({0, 0, 10, 10}, 0), make_gt({20, 20, 30, 30}, 1),
                               make_gt({40, 40, 50, 50}, 1)};
  std::vector<Detection> dets;
  for (const auto& g : gts) dets.push_back(make_det(g.box, 0.9, g.class_id));
  const auto cm = detection_confusion_matrix(dets, gts, 2);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_EQ(cm.total(), 3u);
}

TEST(DetectionConfusion, CrossClassMatch) {
  // IoU of these boxes is 0.6.
  const BoundingBox g{0, 0, 10, 10}, p{0, 0, 10, 6};
  ASSERT_DOUBLE_EQ(det::iou(g, p), 0.6);
  const auto cm = detection_confusion_matrix({make_det(p, 0.9, 1)}, {make_gt(g, 0)}, 2);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.total(), 1u);
}

TEST(DetectionConfusion, UnmatchedGoToBackgroundAndFloorApplies) {
  const std::vector<GtBox> gts{make_gt({0, 0, 10, 10}, 0)};
  const std::vector<Detection> dets{make_det({50, 50, 60, 60}, 0.9, 1), make_det({0, 0, 10, 10}, 0.2, 0)};
  const auto cm = detection_confusion_matrix(dets, gts, 2);
  EXPECT_EQ(cm.at(0, 2), 1u);
  EXPECT_EQ(cm.at(2, 1), 1u);
  EXPECT_EQ(cm.total(), 2u);
}

TEST(DetectionConfusion, MatchesOracleAndConserves) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_set(rng, 3, 20, 10);
    const auto cm = detection_confusion_matrix(s.dets, s.gts, 3, 0.5, 0.25);
    EXPECT_EQ(cm, ref_confusion(s.dets, s.gts, 3, 0.5, 0.25)) << "trial " << trial;

    std::uint64_t matched = 0;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) matched += cm.at(r, c);
    const auto kept = static_cast<std::uint64_t>(
        std::count_if(s.dets.begin(), s.dets.end(), [](const Detection& d) { return d.confidence > 0.25; }));
    std::uint64_t unmatched_gt = 0, unmatched_det = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      unmatched_gt += cm.at(i, 3);
      unmatched_det += cm.at(3, i);
    }
    EXPECT_EQ(cm.total(), matched + unmatched_gt + unmatched_det);
    EXPECT_EQ(matched + unmatched_gt, s.gts.size());
    EXPECT_EQ(matched + unmatched_det, kept);

    const auto nm = cm.normalized();
    for (std::size_t r = 0; r < cm.dim(); ++r) {
      double row = 0;
      std::uint64_t raw = 0;
      for (std::size_t c = 0; c < cm.dim(); ++c) {
        row += nm[r * cm.dim() + c];
        raw += cm.at(r, c);
      }
      EXPECT_NEAR(row, raw ? 1.0 : 0.0, 1e-12);
    }
  }
}

TEST(DetectionConfusion, BadThresholdThrows) {
  EXPECT_THROW(detection_confusion_matrix({}, {}, 2, 1.5, 0.25), ArgumentError);
}

// ---- reports ---------------------------------------------------------------

TEST(EvalReport, DetectionJsonAndCsv) {
  const std::vector<GtBox> gts{make_gt({0, 0, 10, 10}), make_gt({20, 20, 30, 30})};
  const std::vector<Detection> dets{make_det({0, 0, 10, 10}, 0.9), make_det({50, 50, 60, 60}, 0.8),
                                    make_det({20, 20, 30, 30}, 0.7)};
  const auto r = evaluate_detections(dets, gts, {"crack", "pothole"});
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_NEAR(j["detection"]["ap50"]["crack"].get<double>(), 0.8333, 5e-5);
  EXPECT_TRUE(j["detection"]["ap50"]["pothole"].is_null());
  EXPECT_NEAR(j["detection"]["map50"].get<double>(), 0.8333, 5e-5);
  EXPECT_EQ(j["detection"]["confusion"]["labels"].back(), "background");
  EXPECT_EQ(j["detection"]["confusion"]["counts"][0][0], 2);
  EXPECT_EQ(j["detection"]["confusion"]["counts"][2][0], 1);
  EXPECT_FALSE(j.contains("segmentation"));

  const auto csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class,ap50,iou,accuracy");
  EXPECT_NE(csv.find("\npothole,,,\n"), std::string::npos);
  EXPECT_NE(csv.find("\ncrack,0.83333333333333"), std::string::npos);
}

TEST(EvalReport, MaskReport) {
  std::mt19937_64 rng(1);
  std::vector<LabelMap> maps{random_map(rng, 4, 4, 2), random_map(rng, 4, 4, 2)};
  const auto r = evaluate_masks(maps, maps, {"a", "b"});
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_DOUBLE_EQ(j["segmentation"]["mean_iou"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["segmentation"]["mean_accuracy"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["segmentation"]["pixel_accuracy"].get<double>(), 1.0);
  EXPECT_EQ(j["segmentation"]["confusion"]["counts"].size(), 3u);
  EXPECT_THROW(evaluate_masks(maps, {maps[0]}, {"a", "b"}), DimensionError);
}

TEST(ConfusionCsv, Grid) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(0, 2) = 1;
  cm.at(2, 1) = 2;
  EXPECT_EQ(confusion_csv(cm, {"crack", "rut"}, false),
            "truth\\pred,crack,rut,background\n"
            "crack,3,0,1\n"
            "rut,0,0,0\n"
            "background,0,2,0\n");
  EXPECT_EQ(confusion_csv(cm, {"crack", "rut"}, true),
            "truth\\pred,crack,rut,background\n"
            "crack,0.75,0,0.25\n"
            "rut,0,0,0\n"
            "background,0,1,0\n");
}

}  // namespace
}  // namespace roadseg::metrics
