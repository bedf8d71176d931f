#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "roadseg/autograd.hpp"
#include "roadseg/checkpoint.hpp"

namespace roadseg::ag {

/// Per-forward-pass settings shared by every layer of a model.
struct ForwardContext {
  Tape& tape;
  Mode mode = Mode::kTrain;
  /// When false, parameters enter the tape as constants (frozen model).
  bool trainable = true;
  std::mt19937_64 seeds{0};

  Var bind(Parameter& p) { return trainable ? tape.parameter(p) : tape.constant(p.value); }
  std::uint64_t next_seed() { return seeds(); }
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Var forward(Var x, ForwardContext& ctx) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
  /// Non-trainable persistent tensors (running statistics).
  virtual std::vector<std::pair<std::string, Tensor*>> buffers() { return {}; }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

class Dense : public Layer {
 public:
  Dense(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng);
  std::string kind() const override { return "dense"; }
  Var forward(Var x, ForwardContext& ctx) override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  Parameter weight_, bias_;
};

class Conv2d : public Layer {
 public:
  Conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t padding, bool bias, std::mt19937_64& rng);
  std::string kind() const override { return "conv2d"; }
  Var forward(Var x, ForwardContext& ctx) override;
  std::vector<Parameter*> parameters() override;

  std::size_t stride() const { return stride_; }

 private:
  Parameter kernel_, bias_;
  std::size_t stride_, padding_;
  bool has_bias_;
};

class BatchNorm2d : public Layer {
 public:
  BatchNorm2d(std::string name, std::size_t channels, double eps = 1e-5, double momentum = 0.1);
  std::string kind() const override { return "batchnorm2d"; }
  Var forward(Var x, ForwardContext& ctx) override;
  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, Tensor*>> buffers() override;

 private:
  std::string name_;
  Parameter gamma_, beta_;
  RunningStats stats_;
  double eps_;
};

class Upsample2d : public Layer {
 public:
  explicit Upsample2d(std::size_t factor) : factor_(factor) {}
  std::string kind() const override { return "upsample2d"; }
  Var forward(Var x, ForwardContext&) override { return upsample2d_nearest(x, factor_); }

 private:
  std::size_t factor_;
};

class Dropout : public Layer {
 public:
  explicit Dropout(double rate);
  std::string kind() const override { return "dropout"; }
  Var forward(Var x, ForwardContext& ctx) override;

 private:
  double rate_;
};

class ReLU : public Layer {
 public:
  std::string kind() const override { return "relu"; }
  Var forward(Var x, ForwardContext&) override { return relu(x); }
};

class LeakyReLU : public Layer {
 public:
  explicit LeakyReLU(double slope) : slope_(slope) {}
  std::string kind() const override { return "leaky_relu"; }
  Var forward(Var x, ForwardContext&) override { return leaky_relu(x, slope_); }

 private:
  double slope_;
};

class Sigmoid : public Layer {
 public:
  std::string kind() const override { return "sigmoid"; }
  Var forward(Var x, ForwardContext&) override { return sigmoid(x); }
};

/// Reshapes [B, ...] to [B, target...].
class Reshape : public Layer {
 public:
  explicit Reshape(Shape target) : target_(std::move(target)) {}
  std::string kind() const override { return "reshape"; }
  Var forward(Var x, ForwardContext&) override;

 private:
  Shape target_;
};

class Flatten : public Layer {
 public:
  std::string kind() const override { return "flatten"; }
  Var forward(Var x, ForwardContext&) override { return flatten(x); }
};

using BufferList = std::vector<std::pair<std::string, Tensor*>>;

std::vector<NamedTensor> make_state(const std::vector<Parameter*>& params, const BufferList& buffers);
/// Assigns tensors by name; every parameter and buffer must be present with
/// a matching shape.
void load_state(const std::vector<NamedTensor>& state, const std::vector<Parameter*>& params,
                const BufferList& buffers);

/// Ordered stack of layers.
class Sequential {
 public:
  template <class L, class... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Var forward(Var x, ForwardContext& ctx);
  /// Convenience: eval-style forward of a constant batch on a private tape.
  Tensor predict(const Tensor& x, Mode mode = Mode::kEval, std::uint64_t seed = 0);

  std::vector<Parameter*> parameters();
  BufferList buffers();
  std::size_t parameter_count();
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  std::vector<std::string> layer_kinds() const;

  /// Parameters and buffers, named, in a stable order.
  std::vector<NamedTensor> state_dict();
  void load_state_dict(const std::vector<NamedTensor>& state);

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace roadseg::ag
