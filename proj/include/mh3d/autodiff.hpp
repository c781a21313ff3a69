#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "mh3d/tensor.hpp"

namespace mh3d::diff {

// Reverse-mode tape over dense double tensors.
//
// Vars are lightweight handles. A Var either lives on a tape (id >= 0) or is
// detached (id < 0, a plain value). Ops record a node only when at least one
// input requires grad; pure-constant subgraphs evaluate eagerly with no tape
// growth, so the same rendering/loss code serves both training and inference.
//
// Broadcasting: binary arithmetic accepts equal shapes or scalar-with-tensor,
// nothing else. Reductions accumulate sequentially in row-major order, and
// backward visits nodes in strict reverse creation order, so two backward
// passes over one tape are bit-identical.

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,
  affine,  // x @ w + row-broadcast bias, the linear-layer primitive
  relu,
  softplus,
  tanh,
  sigmoid,
  exp,
  log,
  abs,
  clamp,
  sum,
  mean,
  min,
  max,
  sum_last,
  cumsum_exclusive_last,
  reshape,
  gather_weighted,
  conv2d_valid,
};

const char* op_name(OpKind k);

// Fixed sparse linear map: out[i] = sum_j w[i*k+j] * src[idx[i*k+j]].
// Used for trilinear interpolation, where sample positions are constants.
struct WeightedGather {
  int64_t out_size = 0;
  int64_t src_size = 0;
  int per_out = 0;
  std::vector<int64_t> idx;
  std::vector<double> w;
};

class Tape;

class Var {
 public:
  Var() = default;

  // detached value (not on any tape)
  static Var value(Tensor t);
  static Var scalar(double v) { return value(Tensor::scalar(v)); }

  const Tensor& val() const { return *value_; }
  const Shape& shape() const { return value_->shape; }
  bool defined() const { return value_ != nullptr; }
  bool on_tape() const { return id_ >= 0; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Tape* tape_ = nullptr;
  int id_ = -1;
  std::shared_ptr<const Tensor> value_;
};

// Result of backward(): adjoints keyed by node id. The loss adjoint is seeded
// to exactly 1.0; leaves that never influence the loss report zero grads.
class GradMap {
 public:
  const Tensor& at(const Var& v) const;
  bool has(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

class Tape {
 public:
  Var leaf(Tensor v, bool requires_grad = true);

  GradMap backward(const Var& loss) const;

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // op entry points; prefer the free functions below
  Var binary(OpKind k, Var a, Var b);
  Var unary(OpKind k, Var a);
  Var clamp_op(Var a, double lo, double hi);
  Var reduce(OpKind k, Var a);
  Var sum_last_op(Var a);
  Var cumsum_exclusive_last_op(Var a);
  Var reshape_op(Var a, Shape s);
  Var matmul_op(Var a, Var b);
  Var affine_op(Var x, Var w, Var b);
  Var gather_op(Var src, std::shared_ptr<const WeightedGather> table);
  Var conv2d_op(Var img, Tensor kernel);

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::array<int, 3> in{-1, -1, -1};
    std::shared_ptr<const Tensor> value;
    bool requires_grad = false;
    double a0 = 0.0, a1 = 0.0;
    Shape saved_shape;  // input shape for reshape
    std::shared_ptr<const WeightedGather> gather;
    std::shared_ptr<const Tensor> aux;  // conv kernel
  };

  Var record(Node n);
  Var wrap_input(const Var& v);  // interns detached values as constant leaves
  static bool any_requires_grad(std::initializer_list<const Var*> vs);

  std::vector<Node> nodes_;
};

// ---- forward ops ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var relu(Var a);
Var softplus(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var clamp(Var a, double lo, double hi);
Var sum(Var a);
Var mean(Var a);
Var min(Var a);
Var max(Var a);
Var sum_last(Var a);
Var cumsum_exclusive_last(Var a);
Var reshape(Var a, Shape s);
Var matmul(Var a, Var b);
Var affine(Var x, Var w, Var b);
Var gather_weighted(Var src, std::shared_ptr<const WeightedGather> table);
Var conv2d_valid(Var img, Tensor kernel);
Var stop_gradient(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double b) { return add(a, Var::scalar(b)); }
inline Var operator-(Var a, double b) { return sub(a, Var::scalar(b)); }
inline Var operator*(Var a, double b) { return mul(a, Var::scalar(b)); }
inline Var operator/(Var a, double b) { return div(a, Var::scalar(b)); }
inline Var operator+(double a, Var b) { return add(Var::scalar(a), b); }
inline Var operator-(double a, Var b) { return sub(Var::scalar(a), b); }
inline Var operator*(double a, Var b) { return mul(Var::scalar(a), b); }
inline Var operator-(Var a) { return neg(a); }

// Max relative error between analytic gradients and central finite
// differences of f at the given point. f builds a scalar loss from one leaf.
double gradient_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point,
                      double h = 1e-4);

}  // namespace mh3d::diff
