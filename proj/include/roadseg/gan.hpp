#pragma once

// Generator/discriminator pair, adversarial BCE losses and a deterministic
// alternating training loop.

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "roadseg/error.hpp"
#include "roadseg/layers.hpp"
#include "roadseg/optim.hpp"

namespace roadseg::gan {

struct GanConfig {
  std::size_t latent_dim = 100;
  std::size_t height = 32;
  std::size_t width = 32;
  /// Generator width.
  std::size_t base_channels = 32;
  /// Width of the first discriminator conv (doubled at each later conv); 0 means base_channels.
  std::size_t disc_channels = 0;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  /// Stop after this many optimizer steps; 0 means run all epochs.
  std::size_t max_steps = 0;
  std::uint64_t seed = 42;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double leaky_slope = 0.2;
  double dropout = 0.3;
  bool train_generator = true;
  bool train_discriminator = true;
};

/// 16x16 striped toy run: 500 steps, batch 4, seed 42, generator width 10,
/// discriminator width 6. Pair with striped_dataset(64, 16, 16, 42).
GanConfig striped_toy_config();

/// Throws ConfigError for sizes that are not powers of two, smaller than
/// 16x16, or a zero latent/channel/batch setting.
void validate(const GanConfig& cfg);

/// dense -> relu -> reshape -> [upsample x2 -> conv3x3 -> relu] x2 -> conv3x3 -> sigmoid.
/// Output is [B, 3, H, W].
ag::Sequential build_generator(const GanConfig& cfg, std::uint64_t init_seed);

/// conv s2 -> leaky -> dropout -> [conv s2 -> batchnorm -> leaky] x2 -> flatten -> dense -> sigmoid.
/// Output is [B, 1].
ag::Sequential build_discriminator(const GanConfig& cfg, std::uint64_t init_seed);

/// BCE(real, 1) + BCE(fake, 0).
ag::Var discriminator_loss(ag::Var real_out, ag::Var fake_out);
/// BCE(fake, 1).
ag::Var generator_loss(ag::Var fake_out);
double discriminator_loss(const Tensor& real_out, const Tensor& fake_out);
double generator_loss(const Tensor& fake_out);

struct TrainingRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double d_loss = 0;
  double g_loss = 0;
  /// Mean discriminator output on the real batch.
  double real_score = 0;
  /// Mean discriminator output on the generated batch.
  double fake_score = 0;

  friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

struct TrainingLog {
  std::vector<TrainingRecord> records;
  /// CSV with header: step,epoch,d_loss,g_loss,real_score,fake_score
  std::string to_csv() const;
};

/// Standard-normal latent batch [n, latent_dim]; pure function of the seed.
Tensor latent_batch(std::size_t n, std::size_t latent_dim, std::uint64_t seed);

/// Owns both networks and their optimizers; each call to step() performs one
/// discriminator update followed by one generator update.
class GanTrainer {
 public:
  /// images: each [3, H, W] with values in [0, 1].
  GanTrainer(std::vector<Tensor> images, GanConfig cfg);

  TrainingRecord step();

  /// Discriminator half-step on the given batch; generator is frozen.
  /// Returns {d_loss, real_score, fake_score}.
  std::array<double, 3> discriminator_step(const Tensor& real, const Tensor& z);
  /// Generator half-step; discriminator is frozen. Returns g_loss.
  double generator_step(const Tensor& z);

  std::size_t steps_per_epoch() const;
  std::size_t epoch() const { return epoch_; }
  std::size_t steps_done() const { return step_; }

  ag::Sequential& generator() { return generator_; }
  ag::Sequential& discriminator() { return discriminator_; }
  const GanConfig& config() const { return cfg_; }

 private:
  Tensor next_batch();

  std::vector<Tensor> images_;
  GanConfig cfg_;
  ag::Sequential generator_;
  ag::Sequential discriminator_;
  ag::AdamState g_opt_;
  ag::AdamState d_opt_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
};

struct TrainResult {
  ag::Sequential generator;
  ag::Sequential discriminator;
  TrainingLog log;
};

/// Called after each completed epoch (1-based) with both networks.
using EpochCallback = std::function<void(std::size_t epoch, ag::Sequential& g, ag::Sequential& d)>;

/// Throws ArgumentError on an empty dataset or images that do not match cfg.
TrainResult train(std::vector<Tensor> images, const GanConfig& cfg, const EpochCallback& on_epoch = {});

/// n images [3, H, W] with pixels in [0, 1]; deterministic under seed.
std::vector<Tensor> sample(ag::Sequential& generator, std::size_t n, std::size_t latent_dim,
                           std::uint64_t seed);

/// Tiles [3, H, W] images into a single [3, rows*H, cols*W] image.
Tensor make_grid(const std::vector<Tensor>& images, std::size_t cols);

/// Toy training set: vertical stripes of period 4 with random phase, a random
/// color on its complement.
std::vector<Tensor> striped_dataset(std::size_t n, std::size_t height, std::size_t width,
                                    std::uint64_t seed);

}  // namespace roadseg::gan
