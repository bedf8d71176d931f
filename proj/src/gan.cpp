#include "roadseg/gan.hpp"

#include <algorithm>
#include <bit>
#include <iomanip>
#include <sstream>

#include "roadseg/random.hpp"

namespace roadseg::gan {

using namespace roadseg::ag;

namespace {

bool power_of_two(std::size_t v) { return v && std::has_single_bit(v); }

Tensor stack(const std::vector<Tensor>& images, std::span<const std::size_t> idx) {
  const Shape& s = images.at(idx[0]).shape();
  Shape out_shape{idx.size()};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out(out_shape);
  const std::size_t per = images[idx[0]].size();
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy(images[idx[b]].data().begin(), images[idx[b]].data().end(),
              out.data().begin() + static_cast<long>(b * per));
  return out;
}

double mean_of(const Tensor& t) {
  double s = 0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

}  // namespace

GanConfig striped_toy_config() {
  GanConfig cfg;
  cfg.height = cfg.width = 16;
  cfg.base_channels = 10;
  cfg.disc_channels = 6;
  cfg.batch_size = 4;
  cfg.epochs = 32;
  cfg.max_steps = 500;
  cfg.seed = 42;
  return cfg;
}

void validate(const GanConfig& cfg) {
  if (!power_of_two(cfg.height) || !power_of_two(cfg.width))
    throw ConfigError("image size must be powers of two, got " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width));
  if (cfg.height < 16 || cfg.width < 16) throw ConfigError("image size must be at least 16x16");
  if (cfg.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (cfg.base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.lr > 0)) throw ConfigError("lr must be positive");
}

Sequential build_generator(const GanConfig& cfg, std::uint64_t init_seed) {
  validate(cfg);
  Rng rng(init_seed);
  const std::size_t c = cfg.base_channels, h = cfg.height / 4, w = cfg.width / 4;
  Sequential g;
  g.add<Dense>("gen.dense", cfg.latent_dim, c * h * w, rng);
  g.add<ReLU>();
  g.add<Reshape>(Shape{c, h, w});
  g.add<Upsample2d>(2);
  g.add<Conv2d>("gen.conv1", c, c, 3, 1, 1, true, rng);
  g.add<ReLU>();
  g.add<Upsample2d>(2);
  g.add<Conv2d>("gen.conv2", c, c, 3, 1, 1, true, rng);
  g.add<ReLU>();
  g.add<Conv2d>("gen.out", c, 3, 3, 1, 1, true, rng);
  g.add<Sigmoid>();
  return g;
}

Sequential build_discriminator(const GanConfig& cfg, std::uint64_t init_seed) {
  validate(cfg);
  Rng rng(init_seed);
  const std::size_t c = cfg.disc_channels ? cfg.disc_channels : cfg.base_channels;
  const std::size_t m2 = 2, m3 = 4;
  Sequential d;
  d.add<Conv2d>("disc.conv1", 3, c, 3, 2, 1, true, rng);
  d.add<LeakyReLU>(cfg.leaky_slope);
  d.add<Dropout>(cfg.dropout);
  d.add<Conv2d>("disc.conv2", c, m2 * c, 3, 2, 1, false, rng);
  d.add<BatchNorm2d>("disc.bn2", m2 * c);
  d.add<LeakyReLU>(cfg.leaky_slope);
  d.add<Conv2d>("disc.conv3", m2 * c, m3 * c, 3, 2, 1, false, rng);
  d.add<BatchNorm2d>("disc.bn3", m3 * c);
  d.add<LeakyReLU>(cfg.leaky_slope);
  d.add<Flatten>();
  d.add<Dense>("disc.dense", m3 * c * (cfg.height / 8) * (cfg.width / 8), 1, rng);
  d.add<Sigmoid>();
  return d;
}

Var discriminator_loss(Var real_out, Var fake_out) {
  return add(bce_loss(real_out, Tensor(real_out.shape(), 1.0)),
             bce_loss(fake_out, Tensor(fake_out.shape(), 0.0)));
}

Var generator_loss(Var fake_out) { return bce_loss(fake_out, Tensor(fake_out.shape(), 1.0)); }

double discriminator_loss(const Tensor& real_out, const Tensor& fake_out) {
  Tape t;
  return discriminator_loss(t.constant(real_out), t.constant(fake_out)).value().item();
}

double generator_loss(const Tensor& fake_out) {
  Tape t;
  return generator_loss(t.constant(fake_out)).value().item();
}

std::string TrainingLog::to_csv() const {
  std::ostringstream os;
  os << "step,epoch,d_loss,g_loss,real_score,fake_score\n";
  os << std::setprecision(17);
  for (const auto& r : records)
    os << r.step << ',' << r.epoch << ',' << r.d_loss << ',' << r.g_loss << ',' << r.real_score
       << ',' << r.fake_score << '\n';
  return os.str();
}

Tensor latent_batch(std::size_t n, std::size_t latent_dim, std::uint64_t seed) {
  Rng rng(seed);
  Tensor z({n, latent_dim});
  for (auto& v : z.data()) v = standard_normal(rng);
  return z;
}

GanTrainer::GanTrainer(std::vector<Tensor> images, GanConfig cfg)
    : images_(std::move(images)),
      cfg_(cfg),
      generator_(build_generator(cfg, cfg.seed * 2 + 1)),
      discriminator_(build_discriminator(cfg, cfg.seed * 2 + 2)),
      g_opt_(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}),
      d_opt_(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}),
      rng_(cfg.seed) {
  if (images_.empty()) throw ArgumentError("GAN training needs a non-empty dataset");
  const Shape want{3, cfg.height, cfg.width};
  for (std::size_t i = 0; i < images_.size(); ++i)
    if (images_[i].shape() != want)
      throw ArgumentError("image " + std::to_string(i) + " has shape " +
                          shape_str(images_[i].shape()) + ", expected " + shape_str(want));
  order_.resize(images_.size());
}

std::size_t GanTrainer::steps_per_epoch() const {
  return (images_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
}

Tensor GanTrainer::next_batch() {
  if (cursor_ == 0) {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    shuffle(order_, rng_);
  }
  const std::size_t end = std::min(cursor_ + cfg_.batch_size, order_.size());
  Tensor batch = stack(images_, std::span(order_).subspan(cursor_, end - cursor_));
  cursor_ = end;
  return batch;
}

std::array<double, 3> GanTrainer::discriminator_step(const Tensor& real, const Tensor& z) {
  auto d_params = discriminator_.parameters();
  zero_grad(d_params);
  Tape tape;
  ForwardContext gen_ctx{tape, Mode::kTrain, false, Rng(rng_())};
  Var fake = generator_.forward(tape.constant(z), gen_ctx);
  ForwardContext ctx{tape, Mode::kTrain, cfg_.train_discriminator, Rng(rng_())};
  Var real_out = discriminator_.forward(tape.constant(real), ctx);
  // The generated batch enters as a constant so no gradient reaches the generator.
  Var fake_out = discriminator_.forward(tape.constant(fake.value()), ctx);
  Var loss = discriminator_loss(real_out, fake_out);
  const std::array<double, 3> out{loss.value().item(), mean_of(real_out.value()),
                                  mean_of(fake_out.value())};
  if (cfg_.train_discriminator) {
    tape.backward(loss);
    adam_step(d_params, d_opt_);
  }
  return out;
}

double GanTrainer::generator_step(const Tensor& z) {
  auto g_params = generator_.parameters();
  zero_grad(g_params);
  Tape tape;
  ForwardContext gen_ctx{tape, Mode::kTrain, cfg_.train_generator, Rng(rng_())};
  Var fake = generator_.forward(tape.constant(z), gen_ctx);
  ForwardContext disc_ctx{tape, Mode::kTrain, false, Rng(rng_())};
  Var loss = generator_loss(discriminator_.forward(fake, disc_ctx));
  const double value = loss.value().item();
  if (cfg_.train_generator) {
    tape.backward(loss);
    adam_step(g_params, g_opt_);
  }
  return value;
}

TrainingRecord GanTrainer::step() {
  TrainingRecord rec;
  rec.step = step_;
  rec.epoch = epoch_;
  Tensor real = next_batch();
  const std::size_t b = real.dim(0);
  const auto [d_loss, real_score, fake_score] = discriminator_step(real, latent_batch(b, cfg_.latent_dim, rng_()));
  rec.d_loss = d_loss;
  rec.real_score = real_score;
  rec.fake_score = fake_score;
  rec.g_loss = generator_step(latent_batch(b, cfg_.latent_dim, rng_()));
  ++step_;
  if (cursor_ == images_.size()) {
    cursor_ = 0;
    ++epoch_;
  }
  return rec;
}

TrainResult train(std::vector<Tensor> images, const GanConfig& cfg, const EpochCallback& on_epoch) {
  validate(cfg);
  GanTrainer trainer(std::move(images), cfg);
  TrainingLog log;
  const std::size_t total = cfg.epochs * trainer.steps_per_epoch();
  const std::size_t limit = cfg.max_steps ? std::min(total, cfg.max_steps) : total;
  while (trainer.steps_done() < limit) {
    const std::size_t epoch_before = trainer.epoch();
    log.records.push_back(trainer.step());
    if (trainer.epoch() != epoch_before && on_epoch)
      on_epoch(trainer.epoch(), trainer.generator(), trainer.discriminator());
  }
  return {std::move(trainer.generator()), std::move(trainer.discriminator()), std::move(log)};
}

std::vector<Tensor> sample(Sequential& generator, std::size_t n, std::size_t latent_dim,
                           std::uint64_t seed) {
  std::vector<Tensor> out;
  if (n == 0) return out;
  Tensor batch = generator.predict(latent_batch(n, latent_dim, seed), Mode::kEval);
  const std::size_t per = batch.size() / n;
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(s, std::vector<double>(batch.data().begin() + static_cast<long>(i * per),
                                            batch.data().begin() + static_cast<long>((i + 1) * per)));
  return out;
}

Tensor make_grid(const std::vector<Tensor>& images, std::size_t cols) {
  if (images.empty()) throw ArgumentError("make_grid: no images");
  cols = std::max<std::size_t>(1, std::min(cols, images.size()));
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t c = images[0].dim(0), h = images[0].dim(1), w = images[0].dim(2);
  Tensor grid({c, rows * h, cols * w});
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].shape() != images[0].shape()) throw DimensionError("make_grid: mixed image shapes");
    const std::size_t r0 = (k / cols) * h, c0 = (k % cols) * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          grid[(ch * rows * h + r0 + y) * cols * w + c0 + x] = images[k][(ch * h + y) * w + x];
  }
  return grid;
}

std::vector<Tensor> striped_dataset(std::size_t n, std::size_t height, std::size_t width,
                                    std::uint64_t seed) {
  constexpr std::size_t kPeriod = 4;
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t phase = uniform_index(rng, kPeriod);
    double fg[3], bg[3];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      fg[ch] = uniform(rng, 0.7, 0.8);
      bg[ch] = 1.0 - fg[ch];
    }
    Tensor img({3, height, width});
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const bool on = (x + phase) % kPeriod < kPeriod / 2;
        for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * height + y) * width + x] = on ? fg[ch] : bg[ch];
      }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace roadseg::gan
