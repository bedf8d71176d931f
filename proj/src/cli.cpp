#include "roadseg/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "roadseg/checkpoint.hpp"
#include "roadseg/data.hpp"
#include "roadseg/detection.hpp"
#include "roadseg/error.hpp"
#include "roadseg/gan.hpp"
#include "roadseg/metrics.hpp"
#include "roadseg/segmentation.hpp"

namespace roadseg::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "1.0.0";
constexpr double kPublishedSegLr = 5e-5;

// Unsectioned config-file keys belong to the subcommand being run.
class SubcommandConfig : public CLI::ConfigTOML {
 public:
  explicit SubcommandConfig(std::string sub) : sub_(std::move(sub)) {}
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    auto items = CLI::ConfigTOML::from_config(in);
    for (auto& it : items)
      if (it.parents.empty()) it.parents.push_back(sub_);
    return items;
  }

 private:
  std::string sub_;
};

class Logger {
 public:
  Logger(std::ostream& err, std::string command) : err_(err), command_(std::move(command)) {}

  void log(const char* level, const std::string& event, json fields = json::object()) {
    json line{{"level", level}, {"command", command_}, {"event", event}};
    line.update(fields);
    err_ << line.dump() << '\n';
    err_.flush();
  }
  void info(const std::string& event, json fields = json::object()) { log("info", event, std::move(fields)); }

 private:
  std::ostream& err_;
  std::string command_;
};

// Tracks everything a run writes so a failed run can be rolled back.
class Run {
 public:
  Run(fs::path out, std::string command) : out_(std::move(out)), command_(std::move(command)) {}

  const fs::path& dir() const { return out_; }

  fs::path file(const std::string& relative) {
    const fs::path p = out_ / relative;
    make_dirs(p.parent_path());
    if (!fs::exists(p)) created_files_.push_back(p);
    if (std::find(written_.begin(), written_.end(), p) == written_.end()) written_.push_back(p);
    return p;
  }

  void write_text(const std::string& relative, const std::string& text) {
    const auto p = file(relative);
    std::ofstream f(p, std::ios::binary);
    if (!f) throw DataError("cannot write " + p.string());
    f << text;
    if (!f) throw DataError("failed writing " + p.string());
  }

  void note(std::string n) { notes_.push_back(std::move(n)); }

  void finish(const json& options) {
    json outputs = json::array();
    for (const auto& p : written_) outputs.push_back(p.lexically_relative(out_).generic_string());
    outputs.push_back("run.json");
    std::sort(outputs.begin(), outputs.end());
    json run{{"command", command_}, {"version", kVersion}, {"options", options}, {"notes", notes_},
             {"outputs", outputs}};
    write_text("run.json", run.dump(2) + "\n");
  }

  void rollback() noexcept {
    std::error_code ec;
    for (auto it = created_files_.rbegin(); it != created_files_.rend(); ++it) fs::remove(*it, ec);
    for (auto it = created_dirs_.rbegin(); it != created_dirs_.rend(); ++it) fs::remove_all(*it, ec);
  }

 private:
  void make_dirs(const fs::path& dir) {
    if (dir.empty() || fs::exists(dir)) return;
    make_dirs(dir.parent_path());
    fs::create_directory(dir);
    created_dirs_.push_back(dir);
  }

  fs::path out_;
  std::string command_;
  std::vector<fs::path> written_;
  std::vector<fs::path> created_files_;
  std::vector<fs::path> created_dirs_;
  std::vector<std::string> notes_;
};

// Binds options and remembers how to report their resolved values.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    getters_.emplace_back(key(name), [&var] { return json(var); });
    return app_->add_option(name, var, desc)->capture_default_str();
  }
  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    getters_.emplace_back(key(name), [&var] { return json(var); });
    return app_->add_flag(name, var, desc);
  }

  json resolved() const {
    json j = json::object();
    for (const auto& [k, get] : getters_) j[k] = get();
    return j;
  }

 private:
  static std::string key(const std::string& name) {
    std::string k = name.substr(0, name.find(','));
    k.erase(0, k.find_first_not_of('-'));
    return k;
  }

  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<json()>>> getters_;
};

struct Command {
  explicit Command(CLI::App* a) : app(a), opts(a) {}
  virtual ~Command() = default;
  virtual void execute(Run& run, Logger& log) = 0;

  CLI::App* app;
  Options opts;
  std::string out;
};

std::string number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string pad3(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

std::vector<std::string> resolve_classes(const std::vector<std::string>& given,
                                         const std::vector<std::string>& fallback) {
  return given.empty() ? fallback : given;
}

// Oriented sample resized to the given size (0 keeps that dimension).
data::Sample prepared_sample(const data::DatasetManifest& m, const data::ImageRecord& r, std::size_t width,
                             std::size_t height) {
  auto s = data::auto_orient(data::load_sample(m, r));
  if (width || height)
    s = data::resize_with_annotations(s, width ? width : s.image.width, height ? height : s.image.height);
  return s;
}

// Ground-truth label map of a record in oriented coordinates at the given size,
// without reading its pixels.
LabelMap record_labels(const data::ImageRecord& r, std::size_t width, std::size_t height) {
  data::Sample s{data::Image(r.width, r.height), r};
  s = data::auto_orient(s);
  if (s.record.width != width || s.record.height != height) {
    const double fx = static_cast<double>(width) / static_cast<double>(s.record.width);
    const double fy = static_cast<double>(height) / static_cast<double>(s.record.height);
    for (auto& a : s.record.annotations)
      for (auto& p : a.polygon) p = {p.x * fx, p.y * fy};
    s.record.width = width;
    s.record.height = height;
  }
  return data::label_map(s.record);
}

std::vector<std::uint8_t> heatmap_bytes(const std::vector<double>& grid) {
  std::vector<std::uint8_t> out(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(grid[i], 0.0, 1.0) * 255.0));
  return out;
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

// ---- stats -------------------------------------------------------------------

struct Stats : Command {
  std::string manifest;
  std::size_t grid = 64;

  explicit Stats(CLI::App* a) : Command(a) {
    opts.add("--manifest", manifest, "Dataset manifest JSON")->required();
    opts.add("--out", out, "Output directory")->required();
    opts.add("--grid", grid, "Heatmap grid size")->check(CLI::PositiveNumber);
  }

  void execute(Run& run, Logger& log) override {
    const auto m = data::load_manifest(manifest);
    const auto counts = data::class_histogram(m);
    std::size_t total = 0;
    for (auto c : counts) total += c;

    std::ostringstream csv;
    csv << "class_id,class,count,fraction\n";
    json summary{{"images", m.images.size()}, {"annotations", total}};
    json per = json::object();
    std::vector<std::string> under;
    std::size_t lo = SIZE_MAX, hi = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      const double frac = total ? static_cast<double>(counts[k]) / static_cast<double>(total) : 0.0;
      csv << k << ',' << m.classes[k] << ',' << counts[k] << ',' << number(frac) << '\n';
      per[m.classes[k]] = {{"count", counts[k]}, {"fraction", frac}};
      if (total && frac < 0.5 / static_cast<double>(counts.size())) under.push_back(m.classes[k]);
      lo = std::min(lo, counts[k]);
      hi = std::max(hi, counts[k]);
    }
    summary["classes"] = per;
    summary["imbalance_ratio"] = lo > 0 ? json(static_cast<double>(hi) / static_cast<double>(lo)) : json(nullptr);
    summary["underrepresented"] = under;
    run.write_text("histogram.csv", csv.str());
    run.write_text("summary.json", summary.dump(2) + "\n");

    for (std::size_t k = 0; k < m.classes.size(); ++k) {
      const auto h = data::annotation_heatmap(m, static_cast<int>(k), grid, grid);
      data::write_pgm(run.file("heatmap_" + m.classes[k] + ".pgm"), grid, grid, heatmap_bytes(h));
    }
    log.info("histogram", {{"counts", counts}, {"underrepresented", under}});
  }
};

// ---- split -------------------------------------------------------------------

struct SplitCmd : Command {
  std::string manifest;
  double train = 0.85, valid = 0.10, test = 0.05;
  std::uint64_t seed = 42;

  explicit SplitCmd(CLI::App* a) : Command(a) {
    opts.add("--manifest", manifest, "Dataset manifest JSON")->required();
    opts.add("--out", out, "Output directory")->required();
    opts.add("--train", train, "Training fraction")->check(CLI::Range(0.0, 1.0));
    opts.add("--valid", valid, "Validation fraction")->check(CLI::Range(0.0, 1.0));
    opts.add("--test", test, "Test fraction")->check(CLI::Range(0.0, 1.0));
    opts.add("--seed", seed, "Shuffle seed");
  }

  void execute(Run& run, Logger& log) override {
    const auto m = data::load_manifest(manifest);
    if (std::abs(train + valid + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
    auto s = data::split_dataset(m, {train, valid, test}, seed);
    const fs::path out_abs = fs::absolute(run.dir()).lexically_normal();
    const fs::path base_abs = fs::absolute(m.base_dir).lexically_normal();
    for (auto [name, part] : {std::pair{"train", &s.train}, {"valid", &s.valid}, {"test", &s.test}}) {
      for (auto& r : part->images) r.path = (base_abs / r.path).lexically_normal().lexically_relative(out_abs).generic_string();
      data::save_manifest(run.file(std::string(name) + ".json"), *part);
    }
    log.info("split", {{"train", s.train.images.size()}, {"valid", s.valid.images.size()},
                       {"test", s.test.images.size()}});
  }
};

// ---- augment -----------------------------------------------------------------

struct AugmentParams {
  double zoom = 0.2, brightness = 0.25, saturation = 0.25;

  data::Sample apply(const data::Sample& s, Rng& rng) const {
    const double z = uniform(rng, 0.0, zoom);
    const double b = uniform(rng, -brightness, brightness);
    const double c = uniform(rng, -saturation, saturation);
    auto out = data::augment_crop_zoom(s, z, rng);
    out = data::augment_brightness(out, b);
    return data::augment_saturation(out, c);
  }

  void bind(Options& opts) {
    opts.add("--zoom", zoom, "Maximum crop zoom")->check(CLI::Range(0.0, 0.2));
    opts.add("--brightness", brightness, "Maximum brightness change")->check(CLI::Range(0.0, 0.25));
    opts.add("--saturation", saturation, "Maximum saturation change")->check(CLI::Range(0.0, 0.25));
  }
};

struct Augment : Command {
  std::string manifest;
  std::size_t copies = 1;
  std::size_t width = 0, height = 0;
  bool no_original = false;
  std::uint64_t seed = 42;
  AugmentParams params;

  explicit Augment(CLI::App* a) : Command(a) {
    opts.add("--manifest", manifest, "Dataset manifest JSON")->required();
    opts.add("--out", out, "Output directory")->required();
    opts.add("--copies", copies, "Augmented copies per image");
    opts.add("--width", width, "Resize width before augmenting (0 keeps)");
    opts.add("--height", height, "Resize height before augmenting (0 keeps)");
    opts.flag("--no-original", no_original, "Do not emit the oriented, resized original");
    opts.add("--seed", seed, "Augmentation seed");
    params.bind(opts);
  }

  void execute(Run& run, Logger& log) override {
    const auto m = data::load_manifest(manifest);
    data::DatasetManifest result;
    result.classes = m.classes;
    Rng rng(seed);
    std::set<std::string> stems;
    for (std::size_t i = 0; i < m.images.size(); ++i) {
      const auto s = prepared_sample(m, m.images[i], width, height);
      std::string stem = fs::path(m.images[i].path).stem().string();
      if (!stems.insert(stem).second) stem += "_" + std::to_string(i);
      auto emit = [&](const data::Sample& x, const std::string& suffix) {
        const std::string rel = "images/" + stem + suffix + ".png";
        data::write_png(run.file(rel), x.image);
        auto rec = x.record;
        rec.path = rel;
        result.images.push_back(std::move(rec));
      };
      if (!no_original) emit(s, "_orig");
      for (std::size_t c = 1; c <= copies; ++c) emit(params.apply(s, rng), "_aug" + std::to_string(c));
    }
    data::save_manifest(run.file("manifest.json"), result);
    log.info("augmented", {{"inputs", m.images.size()}, {"outputs", result.images.size()}});
  }
};

// ---- make-synthetic ------------------------------------------------------------

struct MakeSynthetic : Command {
  std::size_t count = 10, width = 32, height = 32;
  std::uint64_t seed = 42;

  explicit MakeSynthetic(CLI::App* a) : Command(a) {
    opts.add("--out", out, "Output directory")->required();
    opts.add("--count", count, "Number of images");
    opts.add("--width", width, "Image width")->check(CLI::Range(8, 4096));
    opts.add("--height", height, "Image height")->check(CLI::Range(8, 4096));
    opts.add("--seed", seed, "Scene seed");
  }

  void execute(Run& run, Logger& log) override {
    const auto ds = data::make_synthetic(count, width, height, seed);
    for (std::size_t i = 0; i < ds.images.size(); ++i)
      data::write_ppm(run.file(ds.manifest.images[i].path), ds.images[i]);
    data::save_manifest(run.file("manifest.json"), ds.manifest);
    log.info("synthetic", {{"images", count}, {"histogram", data::class_histogram(ds.manifest)}});
  }
};

// ---- GAN ---------------------------------------------------------------------

json gan_architecture(const gan::GanConfig& c) {
  return {{"latent_dim", c.latent_dim},     {"height", c.height},   {"width", c.width},
          {"base_channels", c.base_channels}, {"disc_channels", c.disc_channels},
          {"leaky_slope", c.leaky_slope},   {"dropout", c.dropout}};
}

gan::GanConfig gan_from_json(const json& j) {
  gan::GanConfig c;
  try {
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.base_channels = j.at("base_channels").get<std::size_t>();
    c.disc_channels = j.at("disc_channels").get<std::size_t>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    c.dropout = j.at("dropout").get<double>();
  } catch (const json::exception& e) {
    throw DataError(std::string("gan_config.json: ") + e.what());
  }
  return c;
}

void write_grid(Run& run, const std::string& rel, const std::vector<Tensor>& images) {
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(images.size()))));
  data::write_ppm(run.file(rel), data::from_tensor(gan::make_grid(images, cols)));
}

struct TrainGan : Command {
  gan::GanConfig cfg;
  std::string manifest;
  std::size_t stripes = 64;
  std::size_t samples = 16;

  explicit TrainGan(CLI::App* a) : Command(a) {
    cfg.epochs = 50;
    opts.add("--out", out, "Output directory")->required();
    opts.add("--manifest", manifest, "Training images (default: striped toy data)");
    opts.add("--stripes", stripes, "Size of the striped toy dataset when no manifest is given");
    opts.add("--steps", cfg.max_steps, "Stop after this many steps (0 runs all epochs)");
    opts.add("--epochs", cfg.epochs, "Epochs");
    opts.add("--batch", cfg.batch_size, "Batch size");
    opts.add("--latent", cfg.latent_dim, "Latent dimension");
    opts.add("--height", cfg.height, "Image height (power of two)");
    opts.add("--width", cfg.width, "Image width (power of two)");
    opts.add("--base-channels", cfg.base_channels, "Generator width");
    opts.add("--disc-channels", cfg.disc_channels, "Discriminator width (0 = generator width)");
    opts.add("--lr", cfg.lr, "Adam learning rate");
    opts.add("--beta1", cfg.beta1, "Adam beta1");
    opts.add("--beta2", cfg.beta2, "Adam beta2");
    opts.add("--seed", cfg.seed, "Seed");
    opts.add("--samples", samples, "Images per epoch sample grid")->check(CLI::PositiveNumber);
  }

  void execute(Run& run, Logger& log) override {
    gan::validate(cfg);
    std::vector<Tensor> images;
    if (manifest.empty()) {
      images = gan::striped_dataset(stripes, cfg.height, cfg.width, cfg.seed);
    } else {
      const auto m = data::load_manifest(manifest);
      for (const auto& r : m.images) images.push_back(data::to_tensor(prepared_sample(m, r, cfg.width, cfg.height).image));
    }
    if (images.empty()) throw DataError("no training images");

    gan::GanTrainer trainer(std::move(images), cfg);
    const std::size_t total = cfg.epochs * trainer.steps_per_epoch();
    const std::size_t limit = cfg.max_steps ? std::min(total, cfg.max_steps) : total;
    gan::TrainingLog tlog;
    auto snapshot = [&](const std::string& tag) {
      save_checkpoint(run.file("checkpoints/generator_" + tag + ".ckpt"), trainer.generator().state_dict());
      save_checkpoint(run.file("checkpoints/discriminator_" + tag + ".ckpt"), trainer.discriminator().state_dict());
      write_grid(run, "samples/" + tag + ".ppm", gan::sample(trainer.generator(), samples, cfg.latent_dim, cfg.seed));
    };
    const std::size_t every = std::max<std::size_t>(1, limit / 10);
    while (trainer.steps_done() < limit) {
      const std::size_t epoch_before = trainer.epoch();
      const auto rec = trainer.step();
      if (!std::isfinite(rec.d_loss) || !std::isfinite(rec.g_loss))
        throw NumericError("GAN loss became non-finite at step " + std::to_string(rec.step));
      tlog.records.push_back(rec);
      if (trainer.steps_done() % every == 0)
        log.info("step", {{"step", rec.step}, {"d_loss", rec.d_loss}, {"g_loss", rec.g_loss},
                          {"real_score", rec.real_score}, {"fake_score", rec.fake_score}});
      if (trainer.epoch() != epoch_before) snapshot("epoch_" + pad3(trainer.epoch()));
    }
    run.write_text("log.csv", tlog.to_csv());
    save_checkpoint(run.file("generator.ckpt"), trainer.generator().state_dict());
    save_checkpoint(run.file("discriminator.ckpt"), trainer.discriminator().state_dict());
    run.write_text("gan_config.json", gan_architecture(cfg).dump(2) + "\n");
    write_grid(run, "samples/final.ppm", gan::sample(trainer.generator(), samples, cfg.latent_dim, cfg.seed));
    log.info("done", {{"steps", trainer.steps_done()}, {"epochs", trainer.epoch()}});
  }
};

struct SampleGan : Command {
  std::string model_dir;
  std::string checkpoint;
  std::size_t count = 16;
  std::uint64_t seed = 0;

  explicit SampleGan(CLI::App* a) : Command(a) {
    opts.add("--model", model_dir, "train-gan output directory")->required();
    opts.add("--checkpoint", checkpoint, "Generator checkpoint (default: <model>/generator.ckpt)");
    opts.add("--out", out, "Output directory")->required();
    opts.add("--count", count, "Number of images");
    opts.add("--seed", seed, "Latent seed");
  }

  void execute(Run& run, Logger& log) override {
    const auto cfg = gan_from_json(read_json_file(fs::path(model_dir) / "gan_config.json"));
    auto g = gan::build_generator(cfg, 0);
    g.load_state_dict(load_checkpoint(checkpoint.empty() ? fs::path(model_dir) / "generator.ckpt" : fs::path(checkpoint)));
    const auto imgs = gan::sample(g, count, cfg.latent_dim, seed);
    for (std::size_t i = 0; i < imgs.size(); ++i) data::write_ppm(run.file("sample_" + pad3(i) + ".ppm"), data::from_tensor(imgs[i]));
    if (!imgs.empty()) write_grid(run, "grid.ppm", imgs);
    log.info("sampled", {{"count", imgs.size()}});
  }
};

// ---- segmentation ------------------------------------------------------------

json seg_architecture(const seg::MaskFormerConfig& c) {
  return {{"num_classes", c.num_classes}, {"queries", c.queries}, {"embed_dim", c.embed_dim},
          {"stride", c.stride},           {"height", c.height},   {"width", c.width},
          {"stem_channels", c.stem_channels}, {"feature_channels", c.feature_channels}};
}

json epoch_json(const seg::EpochRecord& r) {
  return {{"epoch", r.epoch},       {"steps", r.steps}, {"train_loss", r.train_loss},
          {"val_loss", r.val_loss}, {"mIoU", r.miou},   {"mean_acc", r.mean_acc}};
}

struct TrainSeg : Command {
  std::string manifest, val_manifest;
  seg::SegTrainConfig cfg;
  bool online_augment = false;
  AugmentParams aug;

  explicit TrainSeg(CLI::App* a) : Command(a) {
    opts.add("--manifest", manifest, "Training manifest")->required();
    opts.add("--val-manifest", val_manifest, "Validation manifest (default: evaluate on training data)");
    opts.add("--out", out, "Output directory")->required();
    opts.add("--epochs", cfg.epochs, "Epochs");
    opts.add("--max-steps", cfg.max_steps, "Stop after this many steps (0 runs all epochs)");
    opts.add("--batch", cfg.batch_size, "Images per step");
    opts.add("--lr", cfg.lr, "Adam learning rate");
    opts.add("--beta1", cfg.beta1, "Adam beta1");
    opts.add("--beta2", cfg.beta2, "Adam beta2");
    opts.add("--seed", cfg.seed, "Seed");
    opts.add("--queries", cfg.model.queries, "Number of queries");
    opts.add("--embed-dim", cfg.model.embed_dim, "Query and mask embedding size");
    opts.add("--stride", cfg.model.stride, "Feature stride (power of two)");
    opts.add("--height", cfg.model.height, "Model input height");
    opts.add("--width", cfg.model.width, "Model input width");
    opts.add("--stem-channels", cfg.model.stem_channels, "Stem conv width");
    opts.add("--feature-channels", cfg.model.feature_channels, "Feature map width");
    opts.add("--no-object-weight", cfg.loss.no_object_weight, "Weight of the no-object class term");
    opts.flag("--online-augment", online_augment, "Re-augment the training set every epoch");
    aug.bind(opts);
  }

  std::vector<data::Sample> load(const std::string& path, std::vector<std::string>& stems,
                                 std::vector<std::string>* classes) {
    const auto m = data::load_manifest(path);
    if (classes) *classes = m.classes;
    std::vector<data::Sample> out;
    for (const auto& r : m.images) {
      out.push_back(prepared_sample(m, r, cfg.model.width, cfg.model.height));
      stems.push_back(fs::path(r.path).stem().string());
    }
    return out;
  }

  static std::vector<seg::SegSample> tensors(const std::vector<data::Sample>& samples) {
    std::vector<seg::SegSample> out;
    for (const auto& s : samples) out.push_back({data::to_tensor(s.image), data::label_map(s.record)});
    return out;
  }

  void execute(Run& run, Logger& log) override {
    std::vector<std::string> classes, train_stems, val_stems;
    const auto train_raw = load(manifest, train_stems, &classes);
    if (train_raw.empty()) throw DataError("training manifest has no images");
    cfg.model.num_classes = classes.size();
    seg::validate(cfg.model);
    const auto val_raw = val_manifest.empty() ? std::vector<data::Sample>{} : load(val_manifest, val_stems, nullptr);
    if (cfg.lr != kPublishedSegLr)
      run.note("lr " + number(cfg.lr) + " differs from the published learning rate " + number(kPublishedSegLr));
    if (online_augment) run.note("training images re-augmented every epoch");

    auto val = tensors(val_raw);
    if (val.empty() && online_augment) {
      val = tensors(train_raw);
      val_stems = train_stems;
    }
    const bool eval_on_train = val.empty();
    seg::SegTrainer trainer(tensors(train_raw), val, cfg);
    Rng aug_rng(cfg.seed + 1);
    while (!trainer.done()) {
      if (online_augment && !trainer.log().epochs.empty()) {
        std::vector<data::Sample> augmented;
        for (const auto& s : train_raw) augmented.push_back(aug.apply(s, aug_rng));
        trainer.set_training_data(tensors(augmented));
      }
      const auto rec = trainer.run_epoch();
      log.info("epoch", epoch_json(rec));
    }
    const auto& tlog = trainer.log();
    run.write_text("log.csv", tlog.to_csv());
    save_checkpoint(run.file("last.ckpt"), trainer.model().state_dict());
    save_checkpoint(run.file("best.ckpt"), trainer.best_state());
    json arch = seg_architecture(cfg.model);
    arch["classes"] = classes;
    run.write_text("model_config.json", arch.dump(2) + "\n");

    trainer.model().load_state_dict(trainer.best_state());
    const auto& eval_set = eval_on_train ? tensors(train_raw) : val;
    const auto& stems = eval_on_train ? train_stems : val_stems;
    const auto ev = seg::evaluate_segmentation(trainer.model(), eval_set, cfg.loss);
    for (std::size_t i = 0; i < ev.predictions.size(); ++i)
      data::write_label_map(run.file("predictions/" + stems[i] + ".pgm"), ev.predictions[i]);

    json metrics{{"best_epoch", tlog.best_epoch},
                 {"best", epoch_json(tlog.epochs[tlog.best_epoch])},
                 {"final", epoch_json(tlog.epochs.back())},
                 {"steps", trainer.steps_done()},
                 {"evaluated_on", eval_on_train ? "train" : "validation"},
                 {"parameters", trainer.model().parameter_count()}};
    run.write_text("metrics.json", metrics.dump(2) + "\n");
    log.info("done", metrics);
  }
};

// ---- evaluation --------------------------------------------------------------

std::vector<metrics::GtBox> read_ground_truth_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "image_id,class_id,x1,y1,x2,y2")
    throw DataError(path.string() + ": expected header image_id,class_id,x1,y1,x2,y2");
  std::vector<metrics::GtBox> out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != 6)
      throw DataError(path.string() + " line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      metrics::GtBox g{cells[0], {std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5])},
                       std::stoi(cells[1])};
      if (!g.box.valid()) throw DataError("box corners out of order");
      out.push_back(std::move(g));
    } catch (const std::logic_error& e) {
      throw DataError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<metrics::GtBox> boxes_from_manifest(const data::DatasetManifest& m) {
  std::vector<metrics::GtBox> out;
  for (const auto& r : m.images)
    for (const auto& a : r.annotations) {
      det::BoundingBox b{1e300, 1e300, -1e300, -1e300};
      for (const auto& p : a.polygon) {
        b.x1 = std::min(b.x1, p.x);
        b.y1 = std::min(b.y1, p.y);
        b.x2 = std::max(b.x2, p.x);
        b.y2 = std::max(b.y2, p.y);
      }
      out.push_back({r.path, b, a.class_id});
    }
  return out;
}

void write_report(Run& run, const metrics::EvalReport& report, const metrics::ConfusionMatrix& cm) {
  run.write_text("report.json", report.to_json());
  run.write_text("report.csv", report.to_csv());
  run.write_text("confusion.csv", metrics::confusion_csv(cm, report.class_names, false));
  run.write_text("confusion_normalized.csv", metrics::confusion_csv(cm, report.class_names, true));
}

struct EvalDetections : Command {
  std::string detections, ground_truth, manifest;
  std::vector<std::string> classes;
  double iou = 0.5, conf_floor = det::kConfidenceFloor, nms_iou = det::kNmsIou;
  bool nms = false;

  explicit EvalDetections(CLI::App* a) : Command(a) {
    opts.add("--detections", detections, "Detections CSV (image_id,class_id,x1,y1,x2,y2,confidence)")->required();
    auto* gt = opts.add("--ground-truth", ground_truth, "Ground-truth CSV (image_id,class_id,x1,y1,x2,y2)");
    auto* man = opts.add("--manifest", manifest, "Ground truth as polygon bounding boxes of a manifest");
    gt->excludes(man);
    opts.add("--out", out, "Output directory")->required();
    opts.add("--classes", classes, "Class names (default: manifest or built-in classes)");
    opts.add("--iou", iou, "IoU threshold for a true positive")->check(CLI::Range(0.0, 1.0));
    opts.add("--conf-floor", conf_floor, "Confidence floor for the confusion matrix")->check(CLI::Range(0.0, 1.0));
    opts.flag("--nms", nms, "Apply per-class non-maximum suppression first");
    opts.add("--nms-iou", nms_iou, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));
  }

  void execute(Run& run, Logger& log) override {
    std::vector<metrics::GtBox> gts;
    std::vector<std::string> names = data::default_classes();
    if (!manifest.empty()) {
      const auto m = data::load_manifest(manifest);
      gts = boxes_from_manifest(m);
      names = m.classes;
    } else if (!ground_truth.empty()) {
      gts = read_ground_truth_csv(ground_truth);
    } else {
      throw ConfigError("one of --ground-truth or --manifest is required");
    }
    names = resolve_classes(classes, names);
    auto dets = det::load_detections_csv(detections);
    if (nms) {
      std::map<std::string, std::vector<det::Detection>> by_image;
      for (auto& d : dets) by_image[d.image_id].push_back(d);
      dets.clear();
      for (auto& [id, ds] : by_image)
        for (auto& d : det::nms(ds, nms_iou)) dets.push_back(d);
    }
    const std::size_t k = names.size();
    for (const auto& d : dets)
      if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= k)
        throw DataError("detection class " + std::to_string(d.class_id) + " outside " + std::to_string(k) + " classes");
    for (const auto& g : gts)
      if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= k)
        throw DataError("ground-truth class " + std::to_string(g.class_id) + " outside " + std::to_string(k) + " classes");

    const auto report = metrics::evaluate_detections(dets, gts, names, iou, conf_floor);
    write_report(run, report, report.detection->confusion);
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<det::Detection> cd;
      std::vector<metrics::GtBox> cg;
      for (const auto& d : dets)
        if (static_cast<std::size_t>(d.class_id) == c) cd.push_back(d);
      for (const auto& g : gts)
        if (static_cast<std::size_t>(g.class_id) == c) cg.push_back(g);
      std::ostringstream csv;
      csv << "confidence,precision,recall,true_positive\n";
      for (const auto& p : metrics::pr_curve(cd, cg, iou))
        csv << number(p.confidence) << ',' << number(p.precision) << ',' << number(p.recall) << ','
            << (p.true_positive ? 1 : 0) << '\n';
      run.write_text("pr_" + names[c] + ".csv", csv.str());
    }
    log.info("evaluated", {{"detections", dets.size()}, {"ground_truth", gts.size()},
                           {"mAP50", report.detection->ap50.mean}});
  }
};

struct EvalMasks : Command {
  std::string pred, gt, manifest;
  std::vector<std::string> classes;

  explicit EvalMasks(CLI::App* a) : Command(a) {
    opts.add("--pred", pred, "Directory of predicted label maps (*.pgm)")->required();
    auto* g = opts.add("--gt", gt, "Directory of ground-truth label maps with matching names");
    auto* m = opts.add("--manifest", manifest, "Ground truth rasterized from a manifest (matched by file stem)");
    g->excludes(m);
    opts.add("--out", out, "Output directory")->required();
    opts.add("--classes", classes, "Class names (default: manifest or built-in classes)");
  }

  void execute(Run& run, Logger& log) override {
    if (gt.empty() == manifest.empty()) throw ConfigError("exactly one of --gt or --manifest is required");
    if (!fs::is_directory(pred)) throw DataError("prediction directory " + pred + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(pred))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no .pgm predictions in " + pred);

    std::vector<std::string> names = data::default_classes();
    std::optional<data::DatasetManifest> m;
    std::map<std::string, const data::ImageRecord*> by_stem;
    if (!manifest.empty()) {
      m = data::load_manifest(manifest);
      names = m->classes;
      for (const auto& r : m->images) by_stem[fs::path(r.path).stem().string()] = &r;
    }
    names = resolve_classes(classes, names);

    std::vector<LabelMap> preds, gts;
    for (const auto& f : files) {
      preds.push_back(data::read_label_map(f));
      const auto& p = preds.back();
      if (m) {
        const auto it = by_stem.find(f.stem().string());
        if (it == by_stem.end()) throw DataError("no manifest record for prediction " + f.filename().string());
        gts.push_back(record_labels(*it->second, p.width, p.height));
      } else {
        gts.push_back(data::read_label_map(fs::path(gt) / f.filename()));
        if (gts.back().width != p.width || gts.back().height != p.height)
          throw DataError(f.filename().string() + ": prediction and ground truth differ in size");
      }
    }
    const auto report = metrics::evaluate_masks(preds, gts, names);
    write_report(run, report, report.segmentation->confusion);
    log.info("evaluated", {{"images", preds.size()},
                           {"mIoU", report.segmentation->iou.mean},
                           {"mean_accuracy", report.segmentation->accuracy.mean}});
  }
};

// ---- dispatch ----------------------------------------------------------------

int fail(Logger& log, int code, const char* kind, const std::string& message) {
  log.log("error", "failed", {{"kind", kind}, {"message", message}, {"exit_code", code}});
  return code;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app("Road distress toolkit: data preparation, GAN synthesis, segmentation and evaluation", "roadseg");
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML-style config file; command-line flags override it");

  std::vector<std::unique_ptr<Command>> commands;
  auto add = [&]<class C>(const char* name, const char* desc) {
    commands.push_back(std::make_unique<C>(app.add_subcommand(name, desc)));
  };
  add.operator()<Stats>("stats", "Class histogram, annotation heatmaps and an imbalance summary");
  add.operator()<SplitCmd>("split", "Seeded train/valid/test split of a manifest");
  add.operator()<Augment>("augment", "Orient, resize and augment a dataset into a new manifest");
  add.operator()<MakeSynthetic>("make-synthetic", "Write a synthetic road-scene dataset");
  add.operator()<TrainGan>("train-gan", "Train the GAN and write checkpoints, log.csv and sample grids");
  add.operator()<SampleGan>("sample-gan", "Sample images from a trained generator");
  add.operator()<TrainSeg>("train-seg", "Train the mask-classification segmentation model");
  add.operator()<EvalDetections>("eval-detections", "AP per class, mAP50, PR curves and confusion matrix");
  add.operator()<EvalMasks>("eval-masks", "IoU, accuracy and confusion matrix of label maps");

  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    const bool is_sub = std::any_of(commands.begin(), commands.end(), [&](const auto& c) { return c->app->get_name() == a; });
    if (is_sub) {
      app.config_formatter(std::make_shared<SubcommandConfig>(a));
      break;
    }
  }

  std::string name = "roadseg";
  Logger parse_log(err, name);
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return fail(parse_log, kExitConfig, "config", e.what());
  }

  Command* cmd = nullptr;
  for (auto& c : commands)
    if (c->app->parsed()) cmd = c.get();
  name = cmd->app->get_name();
  Logger log(err, name);
  Run run(cmd->out, name);
  try {
    log.info("start", {{"out", cmd->out}});
    cmd->execute(run, log);
    run.finish(cmd->opts.resolved());
    return kExitOk;
  } catch (const ConfigError& e) {
    run.rollback();
    return fail(log, kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    run.rollback();
    return fail(log, kExitData, "data", e.what());
  } catch (const CheckpointError& e) {
    run.rollback();
    return fail(log, kExitData, "data", e.what());
  } catch (const NumericError& e) {
    run.rollback();
    return fail(log, kExitNumeric, "numeric", e.what());
  } catch (const DimensionError& e) {
    run.rollback();
    return fail(log, kExitData, "data", e.what());
  } catch (const std::invalid_argument& e) {
    run.rollback();
    return fail(log, kExitConfig, "config", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    run.rollback();
    return fail(log, kExitData, "data", e.what());
  } catch (const std::exception& e) {
    run.rollback();
    return fail(log, kExitInternal, "internal", e.what());
  }
}

}  // namespace roadseg::cli
