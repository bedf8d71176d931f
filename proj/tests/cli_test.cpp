#include "roadseg/cli.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "roadseg/data.hpp"

namespace roadseg::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    static int counter = 0;
    dir_ = fs::temp_directory_path() / ("roadseg_cli_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "roadseg");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return run(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  static std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }
  static void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST_F(CliTest, HelpForEverySubcommand) {
  EXPECT_EQ(cli({"--help"}), kExitOk);
  for (const char* sub : {"stats", "split", "augment", "make-synthetic", "train-gan", "sample-gan", "train-seg",
                          "eval-detections", "eval-masks"}) {
    EXPECT_EQ(cli({sub, "--help"}), kExitOk) << sub;
    EXPECT_NE(out_.str().find("--out"), std::string::npos) << sub;
  }
}

TEST_F(CliTest, UsageErrorsAreConfigErrors) {
  EXPECT_EQ(cli({}), kExitConfig);
  EXPECT_EQ(cli({"split"}), kExitConfig);
  EXPECT_EQ(cli({"split", "--manifest", "m.json", "--out", path("o"), "--train", "2"}), kExitConfig);
  EXPECT_FALSE(fs::exists(path("o")));
}

TEST_F(CliTest, SplitThousandRecords) {
  data::DatasetManifest m;
  for (int i = 0; i < 1000; ++i) m.images.push_back({"img/" + std::to_string(i) + ".png", 8, 8, 1, {}});
  data::save_manifest(path("m.json"), m);
  const std::string before = slurp(path("m.json"));
  ASSERT_EQ(cli({"split", "--manifest", path("m.json"), "--out", path("split")}), kExitOk) << err_.str();
  EXPECT_EQ(data::load_manifest(path("split/train.json")).images.size(), 850u);
  EXPECT_EQ(data::load_manifest(path("split/valid.json")).images.size(), 100u);
  EXPECT_EQ(data::load_manifest(path("split/test.json")).images.size(), 50u);
  // Paths are rebased onto the output directory.
  EXPECT_EQ(data::load_manifest(path("split/valid.json")).images[0].path.rfind("../img/", 0), 0u);
  EXPECT_EQ(slurp(path("m.json")), before);
  const auto run = json::parse(slurp(path("split/run.json")));
  EXPECT_EQ(run["command"], "split");
  EXPECT_EQ(run["options"]["seed"], 42);
}

TEST_F(CliTest, StatsWritesHistogramAndHeatmaps) {
  ASSERT_EQ(cli({"make-synthetic", "--out", path("syn"), "--count", "6", "--seed", "3"}), kExitOk);
  ASSERT_EQ(cli({"stats", "--manifest", path("syn/manifest.json"), "--out", path("s1"), "--grid", "16"}), kExitOk);
  ASSERT_EQ(cli({"stats", "--manifest", path("syn/manifest.json"), "--out", path("s2"), "--grid", "16"}), kExitOk);
  std::size_t heatmaps = 0, csvs = 0;
  for (const auto& e : fs::directory_iterator(path("s1"))) {
    heatmaps += e.path().extension() == ".pgm";
    csvs += e.path().extension() == ".csv";
    if (e.path().filename() != "run.json")
      EXPECT_EQ(slurp(e.path()), slurp(dir_ / "s2" / e.path().filename())) << e.path();
  }
  EXPECT_EQ(heatmaps, 4u);
  EXPECT_EQ(csvs, 1u);
  const auto counts = data::class_histogram(data::load_manifest(path("syn/manifest.json")));
  const std::string csv = slurp(path("s1/histogram.csv"));
  EXPECT_NE(csv.find("0,crack," + std::to_string(counts[0]) + ","), std::string::npos);
}

TEST_F(CliTest, StatsOnEmptyManifest) {
  data::save_manifest(path("empty.json"), data::DatasetManifest{});
  ASSERT_EQ(cli({"stats", "--manifest", path("empty.json"), "--out", path("s"), "--grid", "8"}), kExitOk);
  EXPECT_EQ(slurp(path("s/histogram.csv")),
            "class_id,class,count,fraction\n0,crack,0,0\n1,pothole,0,0\n2,damaged_marking,0,0\n3,guardrail,0,0\n");
  std::size_t w = 0, h = 0;
  const auto bytes = data::read_pgm(path("s/heatmap_guardrail.pgm"), w, h);
  EXPECT_EQ(w, 8u);
  EXPECT_EQ(bytes, std::vector<std::uint8_t>(64, 0));
}

TEST_F(CliTest, MissingManifestIsDataErrorAndLeavesNothing) {
  EXPECT_EQ(cli({"stats", "--manifest", path("nope.json"), "--out", path("out/deep")}), kExitData);
  EXPECT_FALSE(fs::exists(path("out")));
  EXPECT_NE(err_.str().find("\"kind\":\"data\""), std::string::npos);
}

TEST_F(CliTest, FailedRunRemovesPartialOutputs) {
  // The second image is missing, so augment fails after writing the first.
  ASSERT_EQ(cli({"make-synthetic", "--out", path("syn"), "--count", "2"}), kExitOk);
  fs::remove(path("syn/img_0001.ppm"));
  fs::create_directories(path("aug"));
  write(path("aug/keep.txt"), "mine");
  EXPECT_EQ(cli({"augment", "--manifest", path("syn/manifest.json"), "--out", path("aug")}), kExitData);
  EXPECT_FALSE(fs::exists(path("aug/images")));
  EXPECT_FALSE(fs::exists(path("aug/run.json")));
  EXPECT_EQ(slurp(path("aug/keep.txt")), "mine");
}

TEST_F(CliTest, AugmentIsSeedReproducible) {
  ASSERT_EQ(cli({"make-synthetic", "--out", path("syn"), "--count", "3"}), kExitOk);
  for (const char* o : {"a", "b"})
    ASSERT_EQ(cli({"augment", "--manifest", path("syn/manifest.json"), "--out", path(o), "--copies", "2", "--seed",
                   "9"}),
              kExitOk);
  EXPECT_EQ(slurp(path("a/manifest.json")), slurp(path("b/manifest.json")));
  EXPECT_EQ(slurp(path("a/images/img_0002_aug2.png")), slurp(path("b/images/img_0002_aug2.png")));
  EXPECT_EQ(data::load_manifest(path("a/manifest.json")).images.size(), 9u);
}

TEST_F(CliTest, ConfigFileWithFlagOverride) {
  write(path("c.toml"), "count = 2\nwidth = 16\n[make-synthetic]\nheight = 24\n");
  ASSERT_EQ(cli({"make-synthetic", "--config", path("c.toml"), "--out", path("syn"), "--width", "20"}), kExitOk);
  const auto m = data::load_manifest(path("syn/manifest.json"));
  ASSERT_EQ(m.images.size(), 2u);
  EXPECT_EQ(m.images[0].width, 20u);
  EXPECT_EQ(m.images[0].height, 24u);
  const auto run = json::parse(slurp(path("syn/run.json")));
  EXPECT_EQ(run["options"]["width"], 20);
  EXPECT_EQ(run["options"]["count"], 2);
}

TEST_F(CliTest, EvalMasksPerfectPrediction) {
  fs::create_directories(path("pred"));
  fs::create_directories(path("gt"));
  LabelMap a(4, 5), b(4, 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a.labels[i] = i % 3 == 0 ? kBackground : static_cast<std::uint8_t>(i % 4);
    b.labels[i] = static_cast<std::uint8_t>((i / 5) % 4);
  }
  for (const auto* d : {"pred", "gt"}) {
    data::write_label_map(dir_ / d / "a.pgm", a);
    data::write_label_map(dir_ / d / "b.pgm", b);
  }
  ASSERT_EQ(cli({"eval-masks", "--pred", path("pred"), "--gt", path("gt"), "--out", path("e")}), kExitOk) << err_.str();
  const auto report = json::parse(slurp(path("e/report.json")));
  EXPECT_EQ(report["segmentation"]["mean_iou"], 1.0);
  EXPECT_EQ(report["segmentation"]["mean_accuracy"], 1.0);
  EXPECT_TRUE(fs::exists(path("e/confusion_normalized.csv")));
}

TEST_F(CliTest, EvalDetectionsApFixture) {
  write(path("gt.csv"), "image_id,class_id,x1,y1,x2,y2\na,0,0,0,10,10\na,0,20,20,30,30\n");
  write(path("det.csv"),
        "image_id,class_id,x1,y1,x2,y2,confidence\n"
        "a,0,0,0,10,10,0.9\na,0,50,50,60,60,0.8\na,0,20,20,30,30,0.7\n");
  ASSERT_EQ(cli({"eval-detections", "--detections", path("det.csv"), "--ground-truth", path("gt.csv"), "--out",
                 path("e")}),
            kExitOk)
      << err_.str();
  const auto report = json::parse(slurp(path("e/report.json")));
  EXPECT_NEAR(report["detection"]["ap50"]["crack"].get<double>(), 0.5 + 0.5 * 2.0 / 3.0, 1e-12);
  EXPECT_TRUE(report["detection"]["ap50"]["pothole"].is_null());
  EXPECT_EQ(slurp(path("e/pr_crack.csv")),
            "confidence,precision,recall,true_positive\n0.9,1,0.5,1\n0.8,0.5,0.5,0\n0.7,0.6666666666666666,1,1\n");
}

TEST_F(CliTest, EvalDetectionsRejectsBadInput) {
  write(path("gt.csv"), "image_id,class_id,x1,y1,x2,y2\na,9,0,0,10,10\n");
  write(path("det.csv"), "image_id,class_id,x1,y1,x2,y2,confidence\n");
  EXPECT_EQ(cli({"eval-detections", "--detections", path("det.csv"), "--ground-truth", path("gt.csv"), "--out",
                 path("e")}),
            kExitData);
  EXPECT_EQ(cli({"eval-detections", "--detections", path("det.csv"), "--out", path("e")}), kExitConfig);
}

TEST_F(CliTest, GanTrainAndSample) {
  ASSERT_EQ(cli({"train-gan", "--out", path("g"), "--steps", "6", "--height", "16", "--width", "16", "--latent", "8",
                 "--base-channels", "4", "--batch", "4", "--stripes", "8", "--samples", "4"}),
            kExitOk)
      << err_.str();
  for (const char* f : {"log.csv", "generator.ckpt", "discriminator.ckpt", "gan_config.json", "samples/final.ppm",
                        "checkpoints/generator_epoch_001.ckpt", "samples/epoch_002.ppm", "run.json"})
    EXPECT_TRUE(fs::exists(dir_ / "g" / f)) << f;
  ASSERT_EQ(cli({"sample-gan", "--model", path("g"), "--out", path("s1"), "--count", "3", "--seed", "5"}), kExitOk);
  ASSERT_EQ(cli({"sample-gan", "--model", path("g"), "--out", path("s2"), "--count", "3", "--seed", "5"}), kExitOk);
  EXPECT_EQ(slurp(path("s1/sample_002.ppm")), slurp(path("s2/sample_002.ppm")));
  EXPECT_EQ(data::read_image(path("s1/grid.ppm")).width, 32u);
}

TEST_F(CliTest, TrainSegRecordsLearningRateDeviation) {
  ASSERT_EQ(cli({"make-synthetic", "--out", path("syn"), "--count", "3"}), kExitOk);
  ASSERT_EQ(cli({"train-seg", "--manifest", path("syn/manifest.json"), "--out", path("seg"), "--max-steps", "4",
                 "--lr", "1e-3", "--queries", "4", "--embed-dim", "8"}),
            kExitOk)
      << err_.str();
  const auto run = json::parse(slurp(path("seg/run.json")));
  EXPECT_EQ(run["options"]["lr"], 1e-3);
  ASSERT_EQ(run["notes"].size(), 1u);
  EXPECT_NE(run["notes"][0].get<std::string>().find("0.001"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("seg/predictions/img_0002.pgm")));
  const auto metrics = json::parse(slurp(path("seg/metrics.json")));
  EXPECT_EQ(metrics["steps"], 4);
}

TEST_F(CliTest, DivergentTrainingIsNumericError) {
  ASSERT_EQ(cli({"make-synthetic", "--out", path("syn"), "--count", "2"}), kExitOk);
  EXPECT_EQ(cli({"train-seg", "--manifest", path("syn/manifest.json"), "--out", path("seg"), "--max-steps", "6",
                 "--lr", "1e300", "--queries", "4", "--embed-dim", "8"}),
            kExitNumeric);
  EXPECT_FALSE(fs::exists(path("seg")));
}

}  // namespace
}  // namespace roadseg::cli
