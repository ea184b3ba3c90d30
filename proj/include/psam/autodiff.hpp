#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>

#include "psam/tensor.hpp"

// Minimal reverse-mode differentiation over a define-by-run tape.
//
// A Tape owns every intermediate value produced by the ops below. Each op
// records a closure that pushes the output gradient back to its inputs.
// Tapes are single-threaded; build one per forward pass.
namespace psam::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using BackwardFn = std::function<void(Tape&, const Tensor& dout)>;

class Tape {
 public:
  // With record = false no backward closures are stored (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that aliases `external`; it must outlive the tape.
  Var param(const Tensor& external, bool requires_grad = true);
  // Leaf owning its value.
  Var input(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return input(std::move(value), false); }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool recording() const { return record_; }

  // Gradient buffer of v, allocated as zeros on first access.
  Tensor& grad(Var v);
  // nullptr when nothing flowed into v.
  const Tensor* grad_if(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& value() const { return external ? *external : owned; }
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  bool record_;
};

// Accumulates `g` into the gradient of `v` when v requires one.
void accumulate(Tape& t, Var v, const Tensor& g);

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// Multiplies by a fixed tensor (dropout masks).
Var mul_const(Var a, const Tensor& c);
Var gelu(Var a);
Var sigmoid(Var a);
Var exp(Var a);

// ---- broadcasting ----
// x {n, c} + v {c} on every row.
Var add_rows(Var x, Var v);
// x {C, H, W} + v {C} on every pixel.
Var add_channels(Var x, Var v);

// ---- linear algebra ----
// a {n, k} * b {k, m}
Var matmul(Var a, Var b);
// x {n, in} * w{out, in}^T + b {out}
Var linear(Var x, Var w, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);

// ---- structure ----
Var concat_rows(Var a, Var b);
// {C1, H, W} ++ {C2, H, W} -> {C1 + C2, H, W}
Var concat_channels(Var a, Var b);
// Elements [begin, begin + count) of a rank-1 tensor.
Var slice(Var a, int begin, int count);
// Rows [begin, begin + count) of a {n, c} matrix.
Var slice_rows(Var a, int begin, int count);
// {C, H, W} -> {C}
Var spatial_mean(Var a);

// ---- normalization ----
// Normalizes each row of {n, c} over c.
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-6);
// Normalizes {C, H, W} over C at every pixel.
Var layer_norm_channels(Var x, Var gamma, Var beta, double eps = 1e-6);

// ---- convolution ----
// x {Ci, H, W}, w {Co, Ci, k, k}, b {Co}; square kernel, zero padding.
Var conv2d(Var x, Var w, Var b, int stride, int pad);
// Kernel 2, stride 2 transposed convolution. x {Ci, h, w}, w {Ci, Co, 2, 2}, b {Co} -> {Co, 2h, 2w}.
Var conv_transpose2x2(Var x, Var w, Var b);

// ---- attention ----
// Scaled dot-product attention split over `heads`. q {n, d}, k {m, d}, v {m, d} -> {n, d}.
Var attention(Var q, Var k, Var v, int heads);

// Sum of all elements as a {1} tensor.
Var sum(Var a);

}  // namespace psam::ad
