#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Tape records every operation of one forward pass. Nodes are appended in
// evaluation order, so parents always precede children and a single reverse
// sweep visits each node exactly once.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "roadseg/tensor.hpp"

namespace roadseg::ag {

class Tape;

/// Trainable tensor owned by a model. `grad` accumulates across backward
/// passes until zero_grad() is called.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad();
};

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class Mode { kTrain, kEval };

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  /// Leaf bound to a model parameter: backward() adds its gradient into p.grad.
  Var parameter(Parameter& p);

  /// Appends an operation node. `backward` receives the tape and the node id
  /// and must accumulate into the parents' gradients via grad_of().
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  /// Reverse sweep from a scalar loss. The tape is consumed afterwards.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  /// Gradient accumulator of a node, allocated on first use; nullptr when the
  /// node does not require a gradient.
  Tensor* grad_of(std::size_t id);
  /// Gradient after backward(); zeros when nothing flowed into the node.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- elementwise / structural --------------------------------------------
// Binary elementwise ops accept equal shapes, or either side of size 1.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);
Var log(Var a);
Var atan(Var a);
/// Clamps values into [lo, hi]; gradient passes only where unclamped.
Var clamp(Var a, double lo, double hi);

Var sum(Var a);
Var mean(Var a);

Var reshape(Var a, Shape shape);
/// [B, ...] -> [B, prod(...)]
Var flatten(Var a);
/// Picks elements by flat index into a rank-1 result.
Var gather(Var a, std::vector<std::size_t> flat_indices);
/// Columns [begin, end) of a matrix.
Var columns(Var a, std::size_t begin, std::size_t end);
Var transpose(Var a);

// ---- layers ---------------------------------------------------------------

Var matmul(Var a, Var b);
/// x[B,I] * w[I,O] + b[O]
Var dense(Var x, Var w, Var b);
/// Cross-correlation of x[B,C,H,W] with k[F,C,Kh,Kw].
Var conv2d(Var x, Var k, std::size_t stride, std::size_t padding);
/// Adds b[C] to every spatial location of x[B,C,H,W].
Var add_channel_bias(Var x, Var b);
Var upsample2d_nearest(Var x, std::size_t factor);

struct RunningStats {
  Tensor mean;
  Tensor var;
  double momentum = 0.1;
};

/// Per-channel normalization over (B,H,W). Train mode uses batch statistics
/// and updates `stats`; eval mode normalizes with `stats`.
Var batchnorm2d(Var x, Var gamma, Var beta, double eps, Mode mode, RunningStats& stats);

Var relu(Var x);
Var leaky_relu(Var x, double slope);
Var sigmoid(Var x);
Var softmax(Var x, std::size_t axis);
/// Inverted dropout; identity in eval mode. The mask is a pure function of seed.
Var dropout(Var x, double rate, Mode mode, std::uint64_t seed);

// ---- losses ---------------------------------------------------------------

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy of probabilities p against targets y.
Var bce_loss(Var p, const Tensor& y);

// ---- utilities ------------------------------------------------------------

/// Builds a scalar-valued graph from the given inputs (one leaf each).
using GraphBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Max normwise relative error between the analytic gradient and central
/// differences with step h, taken over every input. Zero when both vanish.
double grad_check(const GraphBuilder& f, const std::vector<Tensor>& inputs, double h = 1e-5);

/// Tensor-level convenience: runs `f` on constants and returns the value.
Tensor evaluate(const GraphBuilder& f, const std::vector<Tensor>& inputs);

}  // namespace roadseg::ag
