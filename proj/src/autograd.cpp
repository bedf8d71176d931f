#include "roadseg/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace roadseg::ag {

void Parameter::zero_grad() { grad = Tensor(value.shape()); }

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  if (consumed_) throw ArgumentError("tape already consumed by backward()");
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (auto p : parents) {
    if (p >= nodes_.size()) throw ArgumentError("parent node is not on this tape");
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor* Tape::grad_of(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return &n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ArgumentError("loss is not on this tape");
  if (consumed_) throw ArgumentError("tape already consumed by backward()");
  if (loss.value().size() != 1)
    throw ArgumentError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_of(loss.id())->data()[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      if (n.param->grad.shape() != n.grad.shape()) n.param->grad = Tensor(n.grad.shape());
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
    }
  }
}

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

/// Result shape for a binary op with size-1 broadcasting.
Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " do not broadcast");
}

template <class Fwd, class DA, class DB>
Var binary(Var a, Var b, const char* op, Fwd fwd, DA da, DB db) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shape(x, y, op));
  const bool xs = x.size() == 1, ys = y.size() == 1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[xs ? 0 : i], y[ys ? 0 : i]);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    Tensor* gx = tp.grad_of(ia);
    Tensor* gy = tp.grad_of(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = xv[xs ? 0 : i], yi = yv[ys ? 0 : i];
      if (gx) (*gx)[xs ? 0 : i] += g[i] * da(xi, yi);
      if (gy) (*gy)[ys ? 0 : i] += g[i] * db(xi, yi);
    }
  });
}

template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(self);
    Tensor* gx = tp.grad_of(ia);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

// Ties send the gradient to the first operand.
Var minimum(Var a, Var b) {
  return binary(a, b, "minimum", [](double x, double y) { return std::min(x, y); },
                [](double x, double y) { return x <= y ? 1.0 : 0.0; },
                [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Var maximum(Var a, Var b) {
  return binary(a, b, "maximum", [](double x, double y) { return std::max(x, y); },
                [](double x, double y) { return x >= y ? 1.0 : 0.0; },
                [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var atan(Var a) {
  return unary(a, [](double x) { return std::atan(x); },
               [](double x, double) { return 1.0 / (1.0 + x * x); });
}

Var clamp(Var a, double lo, double hi) {
  return unary(a, [=](double x) { return std::clamp(x, lo, hi); },
               [=](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var x, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) throw ArgumentError("leaky_relu slope must be in (0,1)");
  return unary(x, [slope](double v) { return v > 0 ? v : slope * v; },
               [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var sigmoid(Var x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var sum(Var a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = (*tp.grad_of(self))[0];
    Tensor* gx = tp.grad_of(ia);
    for (auto& v : gx->data()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var reshape(Var a, Shape shape) {
  Tape& t = a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    Tensor* gx = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

Var flatten(Var a) {
  require(a.value().rank() >= 1, "flatten: needs rank >= 1");
  const std::size_t b = a.value().dim(0);
  return reshape(a, {b, a.size() / b});
}

Var gather(Var a, std::vector<std::size_t> idx) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  require(!idx.empty(), "gather: empty index list");
  Tensor out({idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < x.size(), "gather: index out of range for " + shape_str(x.shape()));
    out[i] = x[idx[i]];
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    Tensor* gx = tp.grad_of(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[idx[i]] += g[i];
  });
}

Var columns(Var a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  require(x.rank() == 2 && begin < end && end <= x.dim(1),
          "columns: bad range for " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1), w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x[r * cols + begin + c];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    Tensor* gx = tp.grad_of(ia);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) (*gx)[r * cols + begin + c] += g[r * w + c];
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  require(x.rank() == 2, "transpose: needs a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    Tensor* gx = tp.grad_of(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += g[j * m + i];
  });
}

namespace {

// c[M,N] += a[M,K] * b[K,N]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(0),
          "matmul: inner dimensions disagree: " + shape_str(x.shape()) + " x " +
              shape_str(y.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out({m, n});
  gemm_acc(x.data().data(), y.data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    if (Tensor* gx = tp.grad_of(ia)) {
      // gx[M,K] += g[M,N] * y^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * yv[p * n + j];
          (*gx)[i * k + p] += s;
        }
    }
    if (Tensor* gy = tp.grad_of(ib)) {
      // gy[K,N] += x^T * g
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double xv_ip = xv[i * k + p];
          if (xv_ip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gy)[p * n + j] += xv_ip * g[i * n + j];
        }
    }
  });
}

Var dense(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(0),
          "dense: input " + shape_str(xv.shape()) + " incompatible with weight " +
              shape_str(wv.shape()));
  require(bv.rank() == 1 && bv.dim(0) == wv.dim(1),
          "dense: bias " + shape_str(bv.shape()) + " incompatible with weight " +
              shape_str(wv.shape()));
  Var y = matmul(x, w);
  const std::size_t rows = xv.dim(0), cols = wv.dim(1);
  Tensor out = y.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  const std::size_t iy = y.id(), ib = b.id();
  return x.tape().record(std::move(out), {iy, ib}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    if (Tensor* gy = tp.grad_of(iy))
      for (std::size_t i = 0; i < g.size(); ++i) (*gy)[i] += g[i];
    if (Tensor* gb = tp.grad_of(ib))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
  });
}

Var conv2d(Var x, Var k, std::size_t stride, std::size_t padding) {
  const Tensor& xv = x.value();
  const Tensor& kv = k.value();
  require(xv.rank() == 4, "conv2d: input must be [B,C,H,W], got " + shape_str(xv.shape()));
  require(kv.rank() == 4, "conv2d: kernel must be [F,C,Kh,Kw], got " + shape_str(kv.shape()));
  require(xv.dim(1) == kv.dim(1), "conv2d: input " + shape_str(xv.shape()) +
                                      " channel count differs from kernel " +
                                      shape_str(kv.shape()));
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t F = kv.dim(0), KH = kv.dim(2), KW = kv.dim(3);
  require(KH <= H + 2 * padding && KW <= W + 2 * padding,
          "conv2d: kernel " + shape_str(kv.shape()) + " larger than padded input " +
              shape_str(xv.shape()));
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
  Tensor out({B, F, OH, OW});
  const long P = static_cast<long>(padding);
  const long S = static_cast<long>(stride);

  // Output column ow reads input column ow*S + kw - P; [lo, hi) is the range
  // of ow for which that column lies inside the image.
  auto for_each_row = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t kh = 0; kh < KH; ++kh)
            for (std::size_t kw = 0; kw < KW; ++kw) {
              const std::size_t kidx = ((f * C + c) * KH + kh) * KW + kw;
              const long shift = static_cast<long>(kw) - P;
              long lo = shift >= 0 ? 0 : (-shift + S - 1) / S;
              long hi = (static_cast<long>(W) - 1 - shift) / S + 1;
              if (static_cast<long>(W) - 1 - shift < 0) hi = 0;
              hi = std::min(hi, static_cast<long>(OW));
              if (lo >= hi) continue;
              for (std::size_t oh = 0; oh < OH; ++oh) {
                const long ih = static_cast<long>(oh) * S + static_cast<long>(kh) - P;
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                const long xbase =
                    static_cast<long>(((b * C + c) * H + static_cast<std::size_t>(ih)) * W) + shift;
                const std::size_t obase = ((b * F + f) * OH + oh) * OW;
                fn(kidx, xbase, obase, static_cast<std::size_t>(lo), static_cast<std::size_t>(hi));
              }
            }
  };
  const std::size_t step = stride;

  {
    const double* xp = xv.data().data();
    const double* kp = kv.data().data();
    double* op = out.data().data();
    for_each_row([&](std::size_t ki, long xb, std::size_t ob, std::size_t lo, std::size_t hi) {
      const double kval = kp[ki];
      const double* xr = xp + xb;
      double* orow = op + ob;
      for (std::size_t ow = lo; ow < hi; ++ow) orow[ow] += kval * xr[ow * step];
    });
  }
  const std::size_t ix = x.id(), ik = k.id();
  return x.tape().record(std::move(out), {ix, ik}, [=](Tape& tp, std::size_t self) {
    const double* g = tp.grad_of(self)->data().data();
    const double* xp = tp.value(ix).data().data();
    const double* kp = tp.value(ik).data().data();
    Tensor* gx = tp.grad_of(ix);
    Tensor* gk = tp.grad_of(ik);
    if (gx) {
      double* gxp = gx->data().data();
      for_each_row([&](std::size_t ki, long xb, std::size_t ob, std::size_t lo, std::size_t hi) {
        const double kval = kp[ki];
        double* xr = gxp + xb;
        const double* grow = g + ob;
        for (std::size_t ow = lo; ow < hi; ++ow) xr[ow * step] += kval * grow[ow];
      });
    }
    if (gk) {
      double* gkp = gk->data().data();
      for_each_row([&](std::size_t ki, long xb, std::size_t ob, std::size_t lo, std::size_t hi) {
        const double* xr = xp + xb;
        const double* grow = g + ob;
        double acc = 0.0;
        for (std::size_t ow = lo; ow < hi; ++ow) acc += xr[ow * step] * grow[ow];
        gkp[ki] += acc;
      });
    }
  });
}

Var add_channel_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  require(xv.rank() == 4 && bv.rank() == 1 && bv.dim(0) == xv.dim(1),
          "add_channel_bias: bias " + shape_str(bv.shape()) + " does not match input " +
              shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out = xv;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[(n * C + c) * HW + i] += bv[c];
  const std::size_t ix = x.id(), ib = b.id();
  return x.tape().record(std::move(out), {ix, ib}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    if (Tensor* gx = tp.grad_of(ix))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (Tensor* gb = tp.grad_of(ib))
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < HW; ++i) (*gb)[c] += g[(n * C + c) * HW + i];
  });
}

Var upsample2d_nearest(Var x, std::size_t factor) {
  if (factor < 1) throw ArgumentError("upsample2d_nearest: factor must be >= 1");
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "upsample2d_nearest: input must be [B,C,H,W], got " +
                              shape_str(xv.shape()));
  const std::size_t BC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t OH = H * factor, OW = W * factor;
  Tensor out({xv.dim(0), xv.dim(1), OH, OW});
  for (std::size_t n = 0; n < BC; ++n)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow)
        out[(n * OH + oh) * OW + ow] = xv[(n * H + oh / factor) * W + ow / factor];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    Tensor* gx = tp.grad_of(ix);
    for (std::size_t n = 0; n < BC; ++n)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow)
          (*gx)[(n * H + oh / factor) * W + ow / factor] += g[(n * OH + oh) * OW + ow];
  });
}

Var batchnorm2d(Var x, Var gamma, Var beta, double eps, Mode mode, RunningStats& stats) {
  const Tensor& xv = x.value();
  require(xv.rank() == 4, "batchnorm2d: input must be [B,C,H,W], got " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  require(gamma.value().shape() == Shape{C} && beta.value().shape() == Shape{C},
          "batchnorm2d: affine parameters must be [" + std::to_string(C) + "]");
  if (!(eps > 0.0)) throw ArgumentError("batchnorm2d: eps must be positive");
  if (stats.mean.empty()) stats.mean = Tensor({C}, 0.0);
  if (stats.var.empty()) stats.var = Tensor({C}, 1.0);
  const double count = static_cast<double>(B * HW);

  Tensor mu({C}), var({C});
  if (mode == Mode::kTrain) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) s += xv[(n * C + c) * HW + i];
      mu[c] = s / count;
      double q = 0.0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xv[(n * C + c) * HW + i] - mu[c];
          q += d * d;
        }
      var[c] = q / count;
      const double unbiased = count > 1 ? q / (count - 1) : var[c];
      stats.mean[c] = (1 - stats.momentum) * stats.mean[c] + stats.momentum * mu[c];
      stats.var[c] = (1 - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
    }
  } else {
    mu = stats.mean;
    var = stats.var;
  }

  Tensor inv_std({C});
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (n * C + c) * HW + i;
        xhat[idx] = (xv[idx] - mu[c]) * inv_std[c];
        out[idx] = gv[c] * xhat[idx] + bv[c];
      }

  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool train = mode == Mode::kTrain;
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
        const Tensor& g = *tp.grad_of(self);
        const Tensor& gv2 = tp.value(ig);
        Tensor* gx = tp.grad_of(ix);
        Tensor* gg = tp.grad_of(ig);
        Tensor* gb = tp.grad_of(ib);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (gg) (*gg)[c] += sum_gx;
          if (gb) (*gb)[c] += sum_g;
          if (!gx) continue;
          const double k = gv2[c] * inv_std[c];
          for (std::size_t n = 0; n < B; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (n * C + c) * HW + i;
              if (train)
                (*gx)[idx] += k * (g[idx] - sum_g / count - xhat[idx] * sum_gx / count);
              else
                (*gx)[idx] += k * g[idx];
            }
        }
      });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  require(axis < xv.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(xv.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t n = xv.dim(axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    const Tensor& y = tp.value(self);
    Tensor* gx = tp.grad_of(ix);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          (*gx)[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

Var dropout(Var x, double rate, Mode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout: rate must be in [0,1)");
  if (mode == Mode::kEval || rate == 0.0) return x;
  const Tensor& xv = x.value();
  std::mt19937_64 rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(xv.size());
  for (auto& m : mask) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m = u < rate ? 0.0 : keep_scale;
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * mask[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, mask = std::move(mask)](Tape& tp, std::size_t self) {
    const Tensor& g = *tp.grad_of(self);
    Tensor* gx = tp.grad_of(ix);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask[i];
  });
}

Var bce_loss(Var p, const Tensor& y) {
  const Tensor& pv = p.value();
  if (pv.shape() != y.shape())
    throw DimensionError("bce_loss: prediction " + shape_str(pv.shape()) + " vs target " +
                         shape_str(y.shape()));
  const double n = static_cast<double>(pv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double q = std::clamp(pv[i], kBceClamp, 1.0 - kBceClamp);
    total -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  const std::size_t ip = p.id();
  return p.tape().record(Tensor::scalar(total / n), {ip}, [=](Tape& tp, std::size_t self) {
    const double g = (*tp.grad_of(self))[0];
    const Tensor& pv2 = tp.value(ip);
    Tensor* gp = tp.grad_of(ip);
    for (std::size_t i = 0; i < pv2.size(); ++i) {
      const double v = pv2[i];
      if (v < kBceClamp || v > 1.0 - kBceClamp) continue;
      (*gp)[i] += g * (v - y[i]) / (v * (1.0 - v)) / n;
    }
  });
}

double grad_check(const GraphBuilder& f, const std::vector<Tensor>& inputs, double h) {
  if (!(h > 0.0)) throw ArgumentError("grad_check: h must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in));
    Var out = f(tape, vars);
    tape.backward(out);
    for (auto v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval_at = [&](std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& in : xs) vars.push_back(tape.constant(in));
    return f(tape, vars).value().item();
  };
  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor numeric(inputs[t].shape());
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double orig = probe[t][i];
      probe[t][i] = orig + h;
      const double fp = eval_at(probe);
      probe[t][i] = orig - h;
      const double fm = eval_at(probe);
      probe[t][i] = orig;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    double diff = 0.0, mag = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[t][i] - numeric[i]));
      mag = std::max({mag, std::abs(analytic[t][i]), std::abs(numeric[i])});
    }
    if (mag > 0.0) worst = std::max(worst, diff / mag);
  }
  return worst;
}

Tensor evaluate(const GraphBuilder& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.constant(in));
  return f(tape, vars).value();
}

}  // namespace roadseg::ag
