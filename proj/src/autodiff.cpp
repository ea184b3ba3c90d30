#include "psam/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "psam/errors.hpp"

namespace psam::ad {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RMat>;
using CMapM = Eigen::Map<const RMat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using CMapV = Eigen::Map<const Eigen::VectorXd>;

CMapM as_mat(const Tensor& t, int rows, int cols) { return CMapM(t.data(), rows, cols); }
MapM as_mat(Tensor& t, int rows, int cols) { return MapM(t.data(), rows, cols); }
CMapV as_vec(const Tensor& t) { return CMapV(t.data(), static_cast<Eigen::Index>(t.size())); }
MapV as_vec(Tensor& t) { return MapV(t.data(), static_cast<Eigen::Index>(t.size())); }

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

Tape& tape_of(Var a) {
  if (!a.tape) throw std::logic_error("variable is not attached to a tape");
  return *a.tape;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Unfolds x {Ci, H, W} into columns {Ci*k*k, Ho*Wo}.
void im2col(const Tensor& x, int k, int stride, int pad, int ho, int wo, RMat& cols) {
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  cols.setZero(ci * k * k, ho * wo);
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (c * k + ky) * k + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            cols(row, oy * wo + ox) = x[(static_cast<std::size_t>(c) * h + iy) * w + ix];
          }
        }
      }
}

void col2im_add(const RMat& cols, int k, int stride, int pad, int ho, int wo, Tensor& dx) {
  const int ci = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (c * k + ky) * k + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            dx[(static_cast<std::size_t>(c) * h + iy) * w + ix] += cols(row, oy * wo + ox);
          }
        }
      }
}

template <typename F>
Var unary(Var a, F value_fn, double (*slope_fn)(double)) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = value_fn(x[i]);
  return t.record(std::move(out), {a}, [a, slope_fn](Tape& t, const Tensor& dout) {
    if (!t.requires_grad(a)) return;
    const Tensor& x = t.value(a);
    Tensor& g = t.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += dout[i] * slope_fn(x[i]);
  });
}

}  // namespace

const Tensor& Var::value() const { return tape_of(*this).value(*this); }

Tape::Node& Tape::node(Var v) {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::logic_error("variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw std::logic_error("variable does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::param(const Tensor& external, bool requires_grad) {
  Node n;
  n.external = &external;
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::input(Tensor value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  if (record_) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](Var v) { return requires_grad(v); });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const { return node(v).value(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Tape::grad(Var v) {
  Node& n = node(v);
  if (n.grad.empty() && n.value().size() > 0) n.grad = Tensor(n.value().shape());
  return n.grad;
}

const Tensor* Tape::grad_if(Var v) const {
  const Node& n = node(v);
  return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (value(loss).size() != 1) throw DimensionError("backward needs a scalar loss, got " + shape_str(value(loss).shape()));
  grad(loss).fill(1.0);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
  }
}

void accumulate(Tape& t, Var v, const Tensor& g) {
  if (!t.requires_grad(v)) return;
  as_vec(t.grad(v)) += as_vec(g);
}

// ---- elementwise ----

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  as_vec(out) += as_vec(b.value());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& dout) {
    accumulate(t, a, dout);
    accumulate(t, b, dout);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  as_vec(out) -= as_vec(b.value());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& dout) {
    accumulate(t, a, dout);
    if (t.requires_grad(b)) as_vec(t.grad(b)) -= as_vec(dout);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  as_vec(out).array() *= as_vec(b.value()).array();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_vec(t.grad(a)).array() += as_vec(dout).array() * as_vec(t.value(b)).array();
    if (t.requires_grad(b)) as_vec(t.grad(b)).array() += as_vec(dout).array() * as_vec(t.value(a)).array();
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  as_vec(out) *= s;
  return tape_of(a).record(std::move(out), {a}, [a, s](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_vec(t.grad(a)) += s * as_vec(dout);
  });
}

Var mul_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor out = a.value();
  as_vec(out).array() *= as_vec(c).array();
  return tape_of(a).record(std::move(out), {a}, [a, c](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_vec(t.grad(a)).array() += as_vec(dout).array() * as_vec(c).array();
  });
}

Var gelu(Var a) { return unary(a, gelu_value, gelu_slope); }

Var sigmoid(Var a) {
  return unary(a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

// ---- broadcasting ----

Var add_rows(Var x, Var v) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "add_rows");
  const int n = xv.dim(0), c = xv.dim(1);
  if (v.value().size() != static_cast<std::size_t>(c))
    throw DimensionError("add_rows: vector of " + std::to_string(v.value().size()) + " for " + std::to_string(c) +
                         " columns");
  Tensor out = xv;
  as_mat(out, n, c).rowwise() += as_vec(v.value()).transpose();
  return tape_of(x).record(std::move(out), {x, v}, [x, v, n, c](Tape& t, const Tensor& dout) {
    accumulate(t, x, dout);
    if (t.requires_grad(v)) as_vec(t.grad(v)) += as_mat(dout, n, c).colwise().sum().transpose();
  });
}

Var add_channels(Var x, Var v) {
  const Tensor& xv = x.value();
  require_rank(xv, 3, "add_channels");
  const int c = xv.dim(0), p = xv.dim(1) * xv.dim(2);
  if (v.value().size() != static_cast<std::size_t>(c))
    throw DimensionError("add_channels: vector of " + std::to_string(v.value().size()) + " for " +
                         std::to_string(c) + " channels");
  Tensor out = xv;
  as_mat(out, c, p).colwise() += as_vec(v.value());
  return tape_of(x).record(std::move(out), {x, v}, [x, v, c, p](Tape& t, const Tensor& dout) {
    accumulate(t, x, dout);
    if (t.requires_grad(v)) as_vec(t.grad(v)) += as_mat(dout, c, p).rowwise().sum();
  });
}

// ---- linear algebra ----

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const int n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  if (bv.dim(0) != k) throw DimensionError("matmul: " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  Tensor out({n, m});
  as_mat(out, n, m).noalias() = as_mat(av, n, k) * as_mat(bv, k, m);
  return tape_of(a).record(std::move(out), {a, b}, [a, b, n, k, m](Tape& t, const Tensor& dout) {
    const auto g = as_mat(dout, n, m);
    if (t.requires_grad(a)) as_mat(t.grad(a), n, k).noalias() += g * as_mat(t.value(b), k, m).transpose();
    if (t.requires_grad(b)) as_mat(t.grad(b), k, m).noalias() += as_mat(t.value(a), n, k).transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(wv, 2, "linear weight");
  const int out_dim = wv.dim(0), in_dim = wv.dim(1);
  const bool vec = xv.rank() == 1;
  if (!vec) require_rank(xv, 2, "linear input");
  const int n = vec ? 1 : xv.dim(0);
  const int x_in = vec ? xv.dim(0) : xv.dim(1);
  if (x_in != in_dim || b.value().size() != static_cast<std::size_t>(out_dim))
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()) + " bias " +
                         shape_str(b.value().shape()));
  Tensor out(vec ? Shape{out_dim} : Shape{n, out_dim});
  auto o = as_mat(out, n, out_dim);
  o.noalias() = as_mat(xv, n, in_dim) * as_mat(wv, out_dim, in_dim).transpose();
  o.rowwise() += as_vec(b.value()).transpose();
  return tape_of(x).record(std::move(out), {x, w, b}, [x, w, b, n, in_dim, out_dim](Tape& t, const Tensor& dout) {
    const auto g = as_mat(dout, n, out_dim);
    if (t.requires_grad(x)) as_mat(t.grad(x), n, in_dim).noalias() += g * as_mat(t.value(w), out_dim, in_dim);
    if (t.requires_grad(w)) as_mat(t.grad(w), out_dim, in_dim).noalias() += g.transpose() * as_mat(t.value(x), n, in_dim);
    if (t.requires_grad(b)) as_vec(t.grad(b)) += g.colwise().sum().transpose();
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank(av, 2, "transpose");
  const int r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  as_mat(out, c, r) = as_mat(av, r, c).transpose();
  return tape_of(a).record(std::move(out), {a}, [a, r, c](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_mat(t.grad(a), r, c) += as_mat(dout, c, r).transpose();
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_vec(t.grad(a)) += as_vec(dout);
  });
}

// ---- structure ----

Var concat_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "concat_rows");
  require_rank(bv, 2, "concat_rows");
  if (av.dim(1) != bv.dim(1))
    throw DimensionError("concat_rows: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1)});
  std::copy(av.values().begin(), av.values().end(), out.data());
  std::copy(bv.values().begin(), bv.values().end(), out.data() + av.size());
  const std::size_t split = av.size();
  return tape_of(a).record(std::move(out), {a, b}, [a, b, split](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) {
      Tensor& g = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i];
    }
    if (t.requires_grad(b)) {
      Tensor& g = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[split + i];
    }
  });
}

Var concat_channels(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 3, "concat_channels");
  require_rank(bv, 3, "concat_channels");
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
    throw DimensionError("concat_channels: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy(av.values().begin(), av.values().end(), out.data());
  std::copy(bv.values().begin(), bv.values().end(), out.data() + av.size());
  const std::size_t split = av.size();
  return tape_of(a).record(std::move(out), {a, b}, [a, b, split](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) {
      Tensor& g = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[i];
    }
    if (t.requires_grad(b)) {
      Tensor& g = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dout[split + i];
    }
  });
}

Var slice(Var a, int begin, int count) {
  const Tensor& av = a.value();
  require_rank(av, 1, "slice");
  if (begin < 0 || count < 0 || begin + count > av.dim(0))
    throw DimensionError("slice [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         shape_str(av.shape()));
  Tensor out({count});
  std::copy_n(av.data() + begin, count, out.data());
  return tape_of(a).record(std::move(out), {a}, [a, begin, count](Tape& t, const Tensor& dout) {
    if (!t.requires_grad(a)) return;
    Tensor& g = t.grad(a);
    for (int i = 0; i < count; ++i) g[static_cast<std::size_t>(begin + i)] += dout[static_cast<std::size_t>(i)];
  });
}

Var slice_rows(Var a, int begin, int count) {
  const Tensor& av = a.value();
  require_rank(av, 2, "slice_rows");
  if (begin < 0 || count < 0 || begin + count > av.dim(0))
    throw DimensionError("slice_rows out of range for " + shape_str(av.shape()));
  const int c = av.dim(1);
  Tensor out({count, c});
  const std::size_t offset = static_cast<std::size_t>(begin) * c;
  std::copy_n(av.data() + offset, out.size(), out.data());
  return tape_of(a).record(std::move(out), {a}, [a, offset](Tape& t, const Tensor& dout) {
    if (!t.requires_grad(a)) return;
    Tensor& g = t.grad(a);
    for (std::size_t i = 0; i < dout.size(); ++i) g[offset + i] += dout[i];
  });
}

Var spatial_mean(Var a) {
  const Tensor& av = a.value();
  require_rank(av, 3, "spatial_mean");
  const int c = av.dim(0), p = av.dim(1) * av.dim(2);
  Tensor out({c});
  as_vec(out) = as_mat(av, c, p).rowwise().mean();
  return tape_of(a).record(std::move(out), {a}, [a, c, p](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_mat(t.grad(a), c, p).colwise() += as_vec(dout) / static_cast<double>(p);
  });
}

// ---- normalization ----

namespace {

// Normalizes `n` groups of `c` values; element j of group i sits at data[i * group_stride + j * elem_stride].
Var layer_norm_strided(Var x, Var gamma, Var beta, double eps, int n, int c, int group_stride, int elem_stride) {
  const Tensor& xv = x.value();
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c))
    throw DimensionError("layer_norm: affine parameters do not match " + std::to_string(c) + " features");
  const Tensor& g = gamma.value();
  const Tensor& b = beta.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += xv[static_cast<std::size_t>(i * group_stride + j * elem_stride)];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = xv[static_cast<std::size_t>(i * group_stride + j * elem_stride)] - mean;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      const auto at = static_cast<std::size_t>(i * group_stride + j * elem_stride);
      xhat[at] = (xv[at] - mean) * is;
      out[at] = g[static_cast<std::size_t>(j)] * xhat[at] + b[static_cast<std::size_t>(j)];
    }
  }
  return tape_of(x).record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, group_stride, elem_stride, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, const Tensor& dout) {
        const Tensor& g = t.value(gamma);
        Tensor* dg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
        Tensor* db = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
        Tensor* dx = t.requires_grad(x) ? &t.grad(x) : nullptr;
        std::vector<double> dxhat(static_cast<std::size_t>(c));
        for (int i = 0; i < n; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (int j = 0; j < c; ++j) {
            const auto at = static_cast<std::size_t>(i * group_stride + j * elem_stride);
            const auto uj = static_cast<std::size_t>(j);
            if (dg) (*dg)[uj] += dout[at] * xhat[at];
            if (db) (*db)[uj] += dout[at];
            dxhat[uj] = dout[at] * g[uj];
            mean_d += dxhat[uj];
            mean_dx += dxhat[uj] * xhat[at];
          }
          if (!dx) continue;
          mean_d /= c;
          mean_dx /= c;
          const double is = inv_std[static_cast<std::size_t>(i)];
          for (int j = 0; j < c; ++j) {
            const auto at = static_cast<std::size_t>(i * group_stride + j * elem_stride);
            (*dx)[at] += is * (dxhat[static_cast<std::size_t>(j)] - mean_d - xhat[at] * mean_dx);
          }
        }
      });
}

}  // namespace

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  require_rank(x.value(), 2, "layer_norm_rows");
  const int n = x.value().dim(0), c = x.value().dim(1);
  return layer_norm_strided(x, gamma, beta, eps, n, c, c, 1);
}

Var layer_norm_channels(Var x, Var gamma, Var beta, double eps) {
  require_rank(x.value(), 3, "layer_norm_channels");
  const int c = x.value().dim(0), p = x.value().dim(1) * x.value().dim(2);
  return layer_norm_strided(x, gamma, beta, eps, p, c, 1, p);
}

// ---- convolution ----

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 3, "conv2d input");
  require_rank(wv, 4, "conv2d weight");
  const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int co = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != ci || wv.dim(3) != k || b.value().size() != static_cast<std::size_t>(co))
    throw DimensionError("conv2d: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  if (stride < 1) throw DimensionError("conv2d: stride must be positive");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho < 1 || wo < 1) throw DimensionError("conv2d: kernel larger than padded input");
  const int kk = ci * k * k, p = ho * wo;
  RMat cols;
  im2col(xv, k, stride, pad, ho, wo, cols);
  Tensor out({co, ho, wo});
  auto o = as_mat(out, co, p);
  o.noalias() = as_mat(wv, co, kk) * cols;
  o.colwise() += as_vec(b.value());
  return tape_of(x).record(std::move(out), {x, w, b}, [=](Tape& t, const Tensor& dout) {
    const auto g = as_mat(dout, co, p);
    if (t.requires_grad(b)) as_vec(t.grad(b)) += g.rowwise().sum();
    if (t.requires_grad(w)) {
      RMat c2;
      im2col(t.value(x), k, stride, pad, ho, wo, c2);
      as_mat(t.grad(w), co, kk).noalias() += g * c2.transpose();
    }
    if (t.requires_grad(x)) {
      RMat dcols = as_mat(t.value(w), co, kk).transpose() * g;
      col2im_add(dcols, k, stride, pad, ho, wo, t.grad(x));
    }
  });
}

Var conv_transpose2x2(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 3, "conv_transpose2x2 input");
  require_rank(wv, 4, "conv_transpose2x2 weight");
  const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int co = wv.dim(1);
  if (wv.dim(0) != ci || wv.dim(2) != 2 || wv.dim(3) != 2 || b.value().size() != static_cast<std::size_t>(co))
    throw DimensionError("conv_transpose2x2: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
  const int p = h * wd, oh = 2 * h, ow = 2 * wd;
  RMat pre = as_mat(wv, ci, co * 4).transpose() * as_mat(xv, ci, p);
  Tensor out({co, oh, ow});
  const Tensor& bv = b.value();
  for (int c = 0; c < co; ++c)
    for (int a = 0; a < 2; ++a)
      for (int bb = 0; bb < 2; ++bb)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < wd; ++j)
            out[(static_cast<std::size_t>(c) * oh + 2 * i + a) * ow + 2 * j + bb] =
                pre(c * 4 + a * 2 + bb, i * wd + j) + bv[static_cast<std::size_t>(c)];
  return tape_of(x).record(std::move(out), {x, w, b}, [=](Tape& t, const Tensor& dout) {
    RMat dpre(co * 4, p);
    for (int c = 0; c < co; ++c)
      for (int a = 0; a < 2; ++a)
        for (int bb = 0; bb < 2; ++bb)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j)
              dpre(c * 4 + a * 2 + bb, i * wd + j) = dout[(static_cast<std::size_t>(c) * oh + 2 * i + a) * ow + 2 * j + bb];
    if (t.requires_grad(b)) {
      Tensor& db = t.grad(b);
      for (int c = 0; c < co; ++c) db[static_cast<std::size_t>(c)] += dpre.middleRows(c * 4, 4).sum();
    }
    if (t.requires_grad(w)) as_mat(t.grad(w), ci, co * 4).noalias() += as_mat(t.value(x), ci, p) * dpre.transpose();
    if (t.requires_grad(x)) as_mat(t.grad(x), ci, p).noalias() += as_mat(t.value(w), ci, co * 4) * dpre;
  });
}

// ---- attention ----

Var attention(Var q, Var k, Var v, int heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank(qv, 2, "attention q");
  require_rank(kv, 2, "attention k");
  require_rank(vv, 2, "attention v");
  const int n = qv.dim(0), d = qv.dim(1), m = kv.dim(0);
  if (kv.dim(1) != d || vv.dim(0) != m || vv.dim(1) != d)
    throw DimensionError("attention: q " + shape_str(qv.shape()) + " k " + shape_str(kv.shape()) + " v " +
                         shape_str(vv.shape()));
  if (heads < 1 || d % heads != 0)
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto Q = as_mat(qv, n, d);
  const auto K = as_mat(kv, m, d);
  const auto V = as_mat(vv, m, d);
  std::vector<RMat> probs(static_cast<std::size_t>(heads));
  Tensor out({n, d});
  auto O = as_mat(out, n, d);
  for (int hd = 0; hd < heads; ++hd) {
    RMat s = (Q.middleCols(hd * dh, dh) * K.middleCols(hd * dh, dh).transpose()) * inv_sqrt;
    for (int r = 0; r < n; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    O.middleCols(hd * dh, dh).noalias() = s * V.middleCols(hd * dh, dh);
    probs[static_cast<std::size_t>(hd)] = std::move(s);
  }
  return tape_of(q).record(
      std::move(out), {q, k, v}, [=, probs = std::move(probs)](Tape& t, const Tensor& dout) {
        const auto G = as_mat(dout, n, d);
        const auto Qm = as_mat(t.value(q), n, d);
        const auto Km = as_mat(t.value(k), m, d);
        const auto Vm = as_mat(t.value(v), m, d);
        const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
        for (int hd = 0; hd < heads; ++hd) {
          const RMat& P = probs[static_cast<std::size_t>(hd)];
          const auto Gh = G.middleCols(hd * dh, dh);
          if (gv) as_mat(t.grad(v), m, d).middleCols(hd * dh, dh).noalias() += P.transpose() * Gh;
          if (!gq && !gk) continue;
          RMat dP = Gh * Vm.middleCols(hd * dh, dh).transpose();
          RMat dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
          dS *= inv_sqrt;
          if (gq) as_mat(t.grad(q), n, d).middleCols(hd * dh, dh).noalias() += dS * Km.middleCols(hd * dh, dh);
          if (gk) as_mat(t.grad(k), m, d).middleCols(hd * dh, dh).noalias() += dS.transpose() * Qm.middleCols(hd * dh, dh);
        }
      });
}

Var sum(Var a) {
  Tensor out({1});
  out[0] = as_vec(a.value()).sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Tensor& dout) {
    if (t.requires_grad(a)) as_vec(t.grad(a)).array() += dout[0];
  });
}

}  // namespace psam::ad
