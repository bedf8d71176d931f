#include "roadseg/layers.hpp"

#include <cmath>
#include <map>

namespace roadseg::ag {

Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0) * bound;
  return t;
}

Dense::Dense(std::string name, std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight_(name + ".weight", init_uniform({in, out}, in, rng)),
      bias_(name + ".bias", init_uniform({out}, in, rng)) {}

Var Dense::forward(Var x, ForwardContext& ctx) {
  return dense(x, ctx.bind(weight_), ctx.bind(bias_));
}

Conv2d::Conv2d(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
               std::size_t stride, std::size_t padding, bool bias, std::mt19937_64& rng)
    : kernel_(name + ".kernel", init_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng)),
      stride_(stride),
      padding_(padding),
      has_bias_(bias) {
  if (bias) bias_ = Parameter(name + ".bias", init_uniform({out}, in * kernel * kernel, rng));
}

Var Conv2d::forward(Var x, ForwardContext& ctx) {
  Var y = conv2d(x, ctx.bind(kernel_), stride_, padding_);
  return has_bias_ ? add_channel_bias(y, ctx.bind(bias_)) : y;
}

std::vector<Parameter*> Conv2d::parameters() {
  if (has_bias_) return {&kernel_, &bias_};
  return {&kernel_};
}

BatchNorm2d::BatchNorm2d(std::string name, std::size_t channels, double eps, double momentum)
    : name_(name),
      gamma_(name + ".gamma", Tensor({channels}, 1.0)),
      beta_(name + ".beta", Tensor({channels}, 0.0)),
      stats_{Tensor({channels}, 0.0), Tensor({channels}, 1.0), momentum},
      eps_(eps) {}

Var BatchNorm2d::forward(Var x, ForwardContext& ctx) {
  return batchnorm2d(x, ctx.bind(gamma_), ctx.bind(beta_), eps_, ctx.mode, stats_);
}

BufferList BatchNorm2d::buffers() {
  return {{name_ + ".running_mean", &stats_.mean}, {name_ + ".running_var", &stats_.var}};
}

Dropout::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout: rate must be in [0,1)");
}

Var Dropout::forward(Var x, ForwardContext& ctx) {
  // Draw a seed in both modes so train/eval passes consume the stream alike.
  const auto seed = ctx.next_seed();
  return dropout(x, rate_, ctx.mode, seed);
}

Var Reshape::forward(Var x, ForwardContext&) {
  Shape s{x.value().dim(0)};
  s.insert(s.end(), target_.begin(), target_.end());
  return reshape(x, std::move(s));
}

Var Sequential::forward(Var x, ForwardContext& ctx) {
  for (auto& l : layers_) x = l->forward(x, ctx);
  return x;
}

Tensor Sequential::predict(const Tensor& x, Mode mode, std::uint64_t seed) {
  Tape tape;
  ForwardContext ctx{tape, mode, false, std::mt19937_64(seed)};
  return forward(tape.constant(x), ctx).value();
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_)
    for (auto* p : l->parameters()) out.push_back(p);
  return out;
}

BufferList Sequential::buffers() {
  BufferList out;
  for (auto& l : layers_)
    for (auto& b : l->buffers()) out.push_back(b);
  return out;
}

std::size_t Sequential::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

std::vector<std::string> Sequential::layer_kinds() const {
  std::vector<std::string> out;
  for (const auto& l : layers_) out.push_back(l->kind());
  return out;
}

std::vector<NamedTensor> Sequential::state_dict() { return make_state(parameters(), buffers()); }

void Sequential::load_state_dict(const std::vector<NamedTensor>& state) {
  load_state(state, parameters(), buffers());
}

std::vector<NamedTensor> make_state(const std::vector<Parameter*>& params, const BufferList& buffers) {
  std::vector<NamedTensor> out;
  for (auto* p : params) out.push_back({p->name, p->value});
  for (const auto& [name, t] : buffers) out.push_back({name, *t});
  return out;
}

void load_state(const std::vector<NamedTensor>& state, const std::vector<Parameter*>& params,
                const BufferList& buffers) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : state) by_name[nt.name] = &nt.tensor;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape() != shape)
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                            ", model expects " + shape_str(shape));
    return *it->second;
  };
  for (auto* p : params) {
    p->value = fetch(p->name, p->value.shape());
    p->zero_grad();
  }
  for (const auto& [name, t] : buffers) *t = fetch(name, t->shape());
}

}  // namespace roadseg::ag
