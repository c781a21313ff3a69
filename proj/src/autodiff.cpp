#include "mh3d/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace mh3d::diff {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::matmul: return "matmul";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::abs: return "abs";
    case OpKind::clamp: return "clamp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::min: return "min";
    case OpKind::max: return "max";
    case OpKind::sum_last: return "sum_last";
    case OpKind::cumsum_exclusive_last: return "cumsum_exclusive_last";
    case OpKind::reshape: return "reshape";
    case OpKind::gather_weighted: return "gather_weighted";
    case OpKind::conv2d_valid: return "conv2d_valid";
  }
  return "?";
}

namespace {

void ensure_finite(OpKind k, const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) fail("op ", op_name(k), " produced a non-finite value");
}

double stable_softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// rows x cols view of the last axis
std::pair<int64_t, int64_t> last_axis_view(const Shape& s) {
  require(!s.empty(), "reduction over last axis needs rank >= 1");
  int64_t cols = s.back();
  int64_t rows = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, cols};
}

Tensor eval_elementwise_binary(OpKind k, const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.is_scalar();
  const bool b_scalar = b.is_scalar();
  if (!a_scalar && !b_scalar && !same_shape(a.shape, b.shape))
    fail("op ", op_name(k), ": shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape));
  const Shape& out_shape = a_scalar ? b.shape : a.shape;
  Tensor out = Tensor::zeros(out_shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = a_scalar ? a.data[0] : a.data[i];
    const double y = b_scalar ? b.data[0] : b.data[i];
    double r = 0;
    switch (k) {
      case OpKind::add: r = x + y; break;
      case OpKind::sub: r = x - y; break;
      case OpKind::mul: r = x * y; break;
      case OpKind::div: r = x / y; break;
      default: fail("not a binary elementwise op: ", op_name(k));
    }
    out.data[i] = r;
  }
  return out;
}

Tensor eval_unary(OpKind k, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = a.data[i];
    double r = 0;
    switch (k) {
      case OpKind::relu: r = x > 0 ? x : 0.0; break;
      case OpKind::softplus: r = stable_softplus(x); break;
      case OpKind::tanh: r = std::tanh(x); break;
      case OpKind::sigmoid: r = stable_sigmoid(x); break;
      case OpKind::exp: r = std::exp(x); break;
      case OpKind::log:
        if (x <= 0) fail("op log: input ", x, " outside domain (must be > 0)");
        r = std::log(x);
        break;
      case OpKind::abs: r = std::fabs(x); break;
      default: fail("not a unary op: ", op_name(k));
    }
    out.data[i] = r;
  }
  return out;
}

Tensor eval_clamp(const Tensor& a, double lo, double hi) {
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.data[i] = std::clamp(a.data[i], lo, hi);
  return out;
}

Tensor eval_reduce(OpKind k, const Tensor& a) {
  require(a.numel() >= 1, "op ", op_name(k), ": empty tensor");
  double acc;
  switch (k) {
    case OpKind::sum:
    case OpKind::mean: {
      acc = 0.0;
      for (double v : a.data) acc += v;  // sequential row-major accumulation
      if (k == OpKind::mean) acc /= static_cast<double>(a.numel());
      break;
    }
    case OpKind::min: {
      acc = a.data[0];
      for (double v : a.data) acc = std::min(acc, v);
      break;
    }
    case OpKind::max: {
      acc = a.data[0];
      for (double v : a.data) acc = std::max(acc, v);
      break;
    }
    default: fail("not a full reduction: ", op_name(k));
  }
  return Tensor::scalar(acc);
}

Tensor eval_sum_last(const Tensor& a) {
  auto [rows, cols] = last_axis_view(a.shape);
  Shape out_shape(a.shape.begin(), a.shape.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::zeros(out_shape);
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < cols; ++c) acc += a.data[r * cols + c];
    out.data[r] = acc;
  }
  return out;
}

Tensor eval_cumsum_exclusive_last(const Tensor& a) {
  auto [rows, cols] = last_axis_view(a.shape);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      out.data[r * cols + c] = acc;
      acc += a.data[r * cols + c];
    }
  }
  return out;
}

Tensor eval_matmul(const Tensor& a, const Tensor& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2, "matmul: expects rank-2 inputs, got ",
          shape_str(a.shape), " and ", shape_str(b.shape));
  const int64_t m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  require(k == k2, "matmul: inner dimensions differ, ", shape_str(a.shape), " x ",
          shape_str(b.shape));
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const double av = a.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &b.data[p * n];
      double* orow = &out.data[i * n];
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return out;
}

Tensor eval_affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out = eval_matmul(x, w);
  const int64_t m = out.shape[0], n = out.shape[1];
  const bool b_scalar = b.is_scalar();
  require(b_scalar || (b.shape.size() == 1 && b.shape[0] == n),
          "affine: bias shape ", shape_str(b.shape), " incompatible with output cols ", n);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.data[i * n + j] += b_scalar ? b.data[0] : b.data[j];
  return out;
}

Tensor eval_gather(const Tensor& src, const WeightedGather& g) {
  require(src.numel() == g.src_size, "gather_weighted: source size ", src.numel(),
          " != table source size ", g.src_size);
  Tensor out = Tensor::zeros({g.out_size});
  for (int64_t i = 0; i < g.out_size; ++i) {
    double acc = 0.0;
    const int64_t base = i * g.per_out;
    for (int j = 0; j < g.per_out; ++j) acc += g.w[base + j] * src.data[g.idx[base + j]];
    out.data[i] = acc;
  }
  return out;
}

Tensor eval_conv2d_valid(const Tensor& img, const Tensor& ker) {
  require(img.shape.size() == 2 && ker.shape.size() == 2, "conv2d_valid: rank-2 inputs required");
  const int64_t h = img.shape[0], w = img.shape[1], kh = ker.shape[0], kw = ker.shape[1];
  require(kh <= h && kw <= w, "conv2d_valid: kernel ", shape_str(ker.shape),
          " larger than image ", shape_str(img.shape));
  const int64_t oh = h - kh + 1, ow = w - kw + 1;
  Tensor out = Tensor::zeros({oh, ow});
  for (int64_t r = 0; r < oh; ++r)
    for (int64_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j) acc += img.data[(r + i) * w + (c + j)] * ker.data[i * kw + j];
      out.data[r * ow + c] = acc;
    }
  return out;
}

}  // namespace

// ---- Var ------------------------------------------------------------------

Var Var::value(Tensor t) {
  Var v;
  v.value_ = std::make_shared<Tensor>(std::move(t));
  return v;
}

// ---- GradMap ----------------------------------------------------------------

const Tensor& GradMap::at(const Var& v) const {
  require(v.on_tape(), "GradMap::at: var is not on a tape");
  require(v.id() < static_cast<int>(present_.size()) && present_[v.id()],
          "GradMap::at: no gradient recorded for node ", v.id());
  return grads_[v.id()];
}

bool GradMap::has(const Var& v) const {
  return v.on_tape() && v.id() < static_cast<int>(present_.size()) && present_[v.id()];
}

// ---- Tape -------------------------------------------------------------------

bool Tape::any_requires_grad(std::initializer_list<const Var*> vs) {
  for (const Var* v : vs) {
    if (!v->on_tape()) continue;
    if (v->tape()->nodes_[v->id()].requires_grad) return true;
  }
  return false;
}

Var Tape::leaf(Tensor v, bool requires_grad) {
  for (double x : v.data)
    if (!std::isfinite(x)) fail("leaf: non-finite input value");
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::make_shared<Tensor>(std::move(v));
  n.requires_grad = requires_grad;
  return record(std::move(n));
}

Var Tape::record(Node n) {
  nodes_.push_back(std::move(n));
  Var v;
  v.tape_ = this;
  v.id_ = static_cast<int>(nodes_.size()) - 1;
  v.value_ = nodes_.back().value;
  return v;
}

Var Tape::wrap_input(const Var& v) {
  if (v.on_tape()) {
    require(v.tape() == this, "op inputs live on different tapes");
    return v;
  }
  Node n;
  n.kind = OpKind::leaf;
  n.value = v.value_;
  n.requires_grad = false;
  return record(std::move(n));
}

Var Tape::binary(OpKind k, Var a, Var b) {
  Tensor out = (k == OpKind::matmul) ? eval_matmul(a.val(), b.val())
                                     : eval_elementwise_binary(k, a.val(), b.val());
  ensure_finite(k, out);
  if (!any_requires_grad({&a, &b})) return Var::value(std::move(out));
  Var ai = wrap_input(a), bi = wrap_input(b);
  Node n;
  n.kind = k;
  n.in = {ai.id(), bi.id(), -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::unary(OpKind k, Var a) {
  Tensor out = eval_unary(k, a.val());
  ensure_finite(k, out);
  if (!any_requires_grad({&a})) return Var::value(std::move(out));
  Var ai = wrap_input(a);
  Node n;
  n.kind = k;
  n.in = {ai.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::clamp_op(Var a, double lo, double hi) {
  require(lo <= hi, "clamp: lo ", lo, " > hi ", hi);
  Tensor out = eval_clamp(a.val(), lo, hi);
  ensure_finite(OpKind::clamp, out);
  if (!any_requires_grad({&a})) return Var::value(std::move(out));
  Var ai = wrap_input(a);
  Node n;
  n.kind = OpKind::clamp;
  n.in = {ai.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  n.a0 = lo;
  n.a1 = hi;
  return record(std::move(n));
}

Var Tape::reduce(OpKind k, Var a) {
  Tensor out = eval_reduce(k, a.val());
  ensure_finite(k, out);
  if (!any_requires_grad({&a})) return Var::value(std::move(out));
  Var ai = wrap_input(a);
  Node n;
  n.kind = k;
  n.in = {ai.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::sum_last_op(Var a) {
  Tensor out = eval_sum_last(a.val());
  ensure_finite(OpKind::sum_last, out);
  if (!any_requires_grad({&a})) return Var::value(std::move(out));
  Var ai = wrap_input(a);
  Node n;
  n.kind = OpKind::sum_last;
  n.in = {ai.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::cumsum_exclusive_last_op(Var a) {
  Tensor out = eval_cumsum_exclusive_last(a.val());
  ensure_finite(OpKind::cumsum_exclusive_last, out);
  if (!any_requires_grad({&a})) return Var::value(std::move(out));
  Var ai = wrap_input(a);
  Node n;
  n.kind = OpKind::cumsum_exclusive_last;
  n.in = {ai.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::reshape_op(Var a, Shape s) {
  require(shape_numel(s) == a.val().numel(), "reshape: ", shape_str(a.shape()), " -> ",
          shape_str(s), " changes element count");
  Tensor out(s, a.val().data);
  if (!any_requires_grad({&a})) return Var::value(std::move(out));
  Var ai = wrap_input(a);
  Node n;
  n.kind = OpKind::reshape;
  n.in = {ai.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  n.saved_shape = a.shape();
  return record(std::move(n));
}

Var Tape::matmul_op(Var a, Var b) { return binary(OpKind::matmul, a, b); }

Var Tape::affine_op(Var x, Var w, Var b) {
  Tensor out = eval_affine(x.val(), w.val(), b.val());
  ensure_finite(OpKind::affine, out);
  if (!any_requires_grad({&x, &w, &b})) return Var::value(std::move(out));
  Var xi = wrap_input(x), wi = wrap_input(w), bi = wrap_input(b);
  Node n;
  n.kind = OpKind::affine;
  n.in = {xi.id(), wi.id(), bi.id()};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  return record(std::move(n));
}

Var Tape::gather_op(Var src, std::shared_ptr<const WeightedGather> table) {
  Tensor out = eval_gather(src.val(), *table);
  ensure_finite(OpKind::gather_weighted, out);
  if (!any_requires_grad({&src})) return Var::value(std::move(out));
  Var si = wrap_input(src);
  Node n;
  n.kind = OpKind::gather_weighted;
  n.in = {si.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  n.gather = std::move(table);
  return record(std::move(n));
}

Var Tape::conv2d_op(Var img, Tensor kernel) {
  auto ker = std::make_shared<const Tensor>(std::move(kernel));
  Tensor out = eval_conv2d_valid(img.val(), *ker);
  ensure_finite(OpKind::conv2d_valid, out);
  if (!any_requires_grad({&img})) return Var::value(std::move(out));
  Var ii = wrap_input(img);
  Node n;
  n.kind = OpKind::conv2d_valid;
  n.in = {ii.id(), -1, -1};
  n.value = std::make_shared<Tensor>(std::move(out));
  n.requires_grad = true;
  n.aux = std::move(ker);
  return record(std::move(n));
}

GradMap Tape::backward(const Var& loss) const {
  require(loss.on_tape() && loss.tape() == this, "backward: loss is not on this tape");
  require(loss.val().is_scalar(), "backward: loss must be scalar, got shape ",
          shape_str(loss.shape()));

  GradMap gm;
  gm.grads_.resize(nodes_.size());
  gm.present_.assign(nodes_.size(), false);

  auto slot = [&](int id) -> Tensor& {
    if (!gm.present_[id]) {
      gm.grads_[id] = Tensor::zeros(nodes_[id].value->shape);
      gm.present_[id] = true;
    }
    return gm.grads_[id];
  };
  auto wants = [&](int id) { return id >= 0 && nodes_[id].requires_grad; };

  slot(loss.id()).data[0] = 1.0;  // adjoint of the loss seeds to exactly 1

  for (int id = loss.id(); id >= 0; --id) {
    if (!gm.present_[id] || !nodes_[id].requires_grad) continue;
    const Node& n = nodes_[id];
    const Tensor& gy = gm.grads_[id];
    const int ia = n.in[0], ib = n.in[1], ic = n.in[2];

    switch (n.kind) {
      case OpKind::leaf:
        break;

      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul:
      case OpKind::div: {
        const Tensor& av = *nodes_[ia].value;
        const Tensor& bv = *nodes_[ib].value;
        const bool as = av.is_scalar(), bs = bv.is_scalar();
        const int64_t count = gy.numel();
        if (wants(ia)) {
          Tensor& ga = slot(ia);
          for (int64_t i = 0; i < count; ++i) {
            const double g = gy.data[i];
            const double b = bs ? bv.data[0] : bv.data[i];
            double d = 0;
            switch (n.kind) {
              case OpKind::add: d = g; break;
              case OpKind::sub: d = g; break;
              case OpKind::mul: d = g * b; break;
              case OpKind::div: d = g / b; break;
              default: break;
            }
            ga.data[as ? 0 : i] += d;
          }
        }
        if (wants(ib)) {
          Tensor& gb = slot(ib);
          for (int64_t i = 0; i < count; ++i) {
            const double g = gy.data[i];
            const double a = as ? av.data[0] : av.data[i];
            const double b = bs ? bv.data[0] : bv.data[i];
            double d = 0;
            switch (n.kind) {
              case OpKind::add: d = g; break;
              case OpKind::sub: d = -g; break;
              case OpKind::mul: d = g * a; break;
              case OpKind::div: d = -g * a / (b * b); break;
              default: break;
            }
            gb.data[bs ? 0 : i] += d;
          }
        }
        break;
      }

      case OpKind::matmul: {
        const Tensor& av = *nodes_[ia].value;
        const Tensor& bv = *nodes_[ib].value;
        const int64_t m = av.shape[0], k = av.shape[1], nn = bv.shape[1];
        if (wants(ia)) {
          Tensor& ga = slot(ia);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < nn; ++j) {
              const double g = gy.data[i * nn + j];
              if (g == 0.0) continue;
              for (int64_t p = 0; p < k; ++p) ga.data[i * k + p] += g * bv.data[p * nn + j];
            }
        }
        if (wants(ib)) {
          Tensor& gb = slot(ib);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
              const double a = av.data[i * k + p];
              if (a == 0.0) continue;
              for (int64_t j = 0; j < nn; ++j) gb.data[p * nn + j] += a * gy.data[i * nn + j];
            }
        }
        break;
      }

      case OpKind::affine: {
        const Tensor& xv = *nodes_[ia].value;
        const Tensor& wv = *nodes_[ib].value;
        const Tensor& bv = *nodes_[ic].value;
        const int64_t m = xv.shape[0], k = xv.shape[1], nn = wv.shape[1];
        if (wants(ia)) {
          Tensor& gx = slot(ia);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < nn; ++j) {
              const double g = gy.data[i * nn + j];
              if (g == 0.0) continue;
              for (int64_t p = 0; p < k; ++p) gx.data[i * k + p] += g * wv.data[p * nn + j];
            }
        }
        if (wants(ib)) {
          Tensor& gw = slot(ib);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t p = 0; p < k; ++p) {
              const double x = xv.data[i * k + p];
              if (x == 0.0) continue;
              for (int64_t j = 0; j < nn; ++j) gw.data[p * nn + j] += x * gy.data[i * nn + j];
            }
        }
        if (wants(ic)) {
          Tensor& gb = slot(ic);
          if (bv.is_scalar()) {
            double acc = 0.0;
            for (double g : gy.data) acc += g;
            gb.data[0] += acc;
          } else {
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < nn; ++j) gb.data[j] += gy.data[i * nn + j];
          }
        }
        break;
      }

      case OpKind::relu: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i)
          if (xv.data[i] > 0) gx.data[i] += gy.data[i];
        break;
      }
      case OpKind::softplus: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i)
          gx.data[i] += gy.data[i] * stable_sigmoid(xv.data[i]);
        break;
      }
      case OpKind::tanh: {
        if (!wants(ia)) break;
        const Tensor& yv = *n.value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i)
          gx.data[i] += gy.data[i] * (1.0 - yv.data[i] * yv.data[i]);
        break;
      }
      case OpKind::sigmoid: {
        if (!wants(ia)) break;
        const Tensor& yv = *n.value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i)
          gx.data[i] += gy.data[i] * yv.data[i] * (1.0 - yv.data[i]);
        break;
      }
      case OpKind::exp: {
        if (!wants(ia)) break;
        const Tensor& yv = *n.value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i) gx.data[i] += gy.data[i] * yv.data[i];
        break;
      }
      case OpKind::log: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i) gx.data[i] += gy.data[i] / xv.data[i];
        break;
      }
      case OpKind::abs: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i) {
          if (xv.data[i] > 0)
            gx.data[i] += gy.data[i];
          else if (xv.data[i] < 0)
            gx.data[i] -= gy.data[i];
        }
        break;
      }
      case OpKind::clamp: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i)
          if (xv.data[i] >= n.a0 && xv.data[i] <= n.a1) gx.data[i] += gy.data[i];
        break;
      }

      case OpKind::sum: {
        if (!wants(ia)) break;
        Tensor& gx = slot(ia);
        const double g = gy.data[0];
        for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
        break;
      }
      case OpKind::mean: {
        if (!wants(ia)) break;
        Tensor& gx = slot(ia);
        const double g = gy.data[0] / static_cast<double>(gx.numel());
        for (int64_t i = 0; i < gx.numel(); ++i) gx.data[i] += g;
        break;
      }
      case OpKind::min:
      case OpKind::max: {
        // gradient flows only to the arg-extremum element, ties to lowest index
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        Tensor& gx = slot(ia);
        int64_t arg = 0;
        for (int64_t i = 1; i < xv.numel(); ++i) {
          if (n.kind == OpKind::min ? xv.data[i] < xv.data[arg] : xv.data[i] > xv.data[arg])
            arg = i;
        }
        gx.data[arg] += gy.data[0];
        break;
      }

      case OpKind::sum_last: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        auto [rows, cols] = last_axis_view(xv.shape);
        Tensor& gx = slot(ia);
        for (int64_t r = 0; r < rows; ++r) {
          const double g = gy.data[r];
          for (int64_t c = 0; c < cols; ++c) gx.data[r * cols + c] += g;
        }
        break;
      }
      case OpKind::cumsum_exclusive_last: {
        if (!wants(ia)) break;
        const Tensor& xv = *nodes_[ia].value;
        auto [rows, cols] = last_axis_view(xv.shape);
        Tensor& gx = slot(ia);
        // d y[i] / d x[j] = 1 for j < i: reverse exclusive running sum
        for (int64_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (int64_t c = cols - 1; c >= 0; --c) {
            gx.data[r * cols + c] += acc;
            acc += gy.data[r * cols + c];
          }
        }
        break;
      }

      case OpKind::reshape: {
        if (!wants(ia)) break;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < gy.numel(); ++i) gx.data[i] += gy.data[i];
        break;
      }

      case OpKind::gather_weighted: {
        if (!wants(ia)) break;
        const WeightedGather& g = *n.gather;
        Tensor& gx = slot(ia);
        for (int64_t i = 0; i < g.out_size; ++i) {
          const double go = gy.data[i];
          if (go == 0.0) continue;
          const int64_t base = i * g.per_out;
          for (int j = 0; j < g.per_out; ++j) gx.data[g.idx[base + j]] += g.w[base + j] * go;
        }
        break;
      }

      case OpKind::conv2d_valid: {
        if (!wants(ia)) break;
        const Tensor& ker = *n.aux;
        const Tensor& xv = *nodes_[ia].value;
        const int64_t w = xv.shape[1];
        const int64_t kh = ker.shape[0], kw = ker.shape[1];
        const int64_t oh = n.value->shape[0], ow = n.value->shape[1];
        Tensor& gx = slot(ia);
        for (int64_t r = 0; r < oh; ++r)
          for (int64_t c = 0; c < ow; ++c) {
            const double g = gy.data[r * ow + c];
            if (g == 0.0) continue;
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j)
                gx.data[(r + i) * w + (c + j)] += g * ker.data[i * kw + j];
          }
        break;
      }
    }
  }

  // leaves that never reach the loss still report exact (zero) adjoints
  for (size_t id = 0; id < nodes_.size(); ++id)
    if (nodes_[id].kind == OpKind::leaf && nodes_[id].requires_grad && !gm.present_[id])
      slot(static_cast<int>(id));

  return gm;
}

// ---- free functions ---------------------------------------------------------

namespace {
Tape* tape_of(std::initializer_list<const Var*> vs) {
  Tape* t = nullptr;
  for (const Var* v : vs) {
    if (!v->on_tape()) continue;
    if (t == nullptr) t = v->tape();
    else require(t == v->tape(), "op inputs live on different tapes");
  }
  return t;
}
}  // namespace

Var add(Var a, Var b) {
  Tape* t = tape_of({&a, &b});
  if (!t) return Var::value(eval_elementwise_binary(OpKind::add, a.val(), b.val()));
  return t->binary(OpKind::add, a, b);
}
Var sub(Var a, Var b) {
  Tape* t = tape_of({&a, &b});
  if (!t) return Var::value(eval_elementwise_binary(OpKind::sub, a.val(), b.val()));
  return t->binary(OpKind::sub, a, b);
}
Var mul(Var a, Var b) {
  Tape* t = tape_of({&a, &b});
  if (!t) return Var::value(eval_elementwise_binary(OpKind::mul, a.val(), b.val()));
  return t->binary(OpKind::mul, a, b);
}
Var div(Var a, Var b) {
  Tape* t = tape_of({&a, &b});
  if (!t) {
    Tensor out = eval_elementwise_binary(OpKind::div, a.val(), b.val());
    ensure_finite(OpKind::div, out);
    return Var::value(std::move(out));
  }
  return t->binary(OpKind::div, a, b);
}
Var neg(Var a) { return sub(Var::scalar(0.0), a); }

namespace {
Var unary_dispatch(OpKind k, Var a) {
  Tape* t = tape_of({&a});
  if (!t) {
    Tensor out = eval_unary(k, a.val());
    ensure_finite(k, out);
    return Var::value(std::move(out));
  }
  return t->unary(k, a);
}
}  // namespace

Var relu(Var a) { return unary_dispatch(OpKind::relu, a); }
Var softplus(Var a) { return unary_dispatch(OpKind::softplus, a); }
Var tanh(Var a) { return unary_dispatch(OpKind::tanh, a); }
Var sigmoid(Var a) { return unary_dispatch(OpKind::sigmoid, a); }
Var exp(Var a) { return unary_dispatch(OpKind::exp, a); }
Var log(Var a) { return unary_dispatch(OpKind::log, a); }
Var abs(Var a) { return unary_dispatch(OpKind::abs, a); }

Var clamp(Var a, double lo, double hi) {
  Tape* t = tape_of({&a});
  if (!t) return Var::value(eval_clamp(a.val(), lo, hi));
  return t->clamp_op(a, lo, hi);
}

namespace {
Var reduce_dispatch(OpKind k, Var a) {
  Tape* t = tape_of({&a});
  if (!t) return Var::value(eval_reduce(k, a.val()));
  return t->reduce(k, a);
}
}  // namespace

Var sum(Var a) { return reduce_dispatch(OpKind::sum, a); }
Var mean(Var a) { return reduce_dispatch(OpKind::mean, a); }
Var min(Var a) { return reduce_dispatch(OpKind::min, a); }
Var max(Var a) { return reduce_dispatch(OpKind::max, a); }

Var sum_last(Var a) {
  Tape* t = tape_of({&a});
  if (!t) return Var::value(eval_sum_last(a.val()));
  return t->sum_last_op(a);
}
Var cumsum_exclusive_last(Var a) {
  Tape* t = tape_of({&a});
  if (!t) return Var::value(eval_cumsum_exclusive_last(a.val()));
  return t->cumsum_exclusive_last_op(a);
}
Var reshape(Var a, Shape s) {
  Tape* t = tape_of({&a});
  if (!t) {
    require(shape_numel(s) == a.val().numel(), "reshape: element count mismatch");
    return Var::value(Tensor(std::move(s), a.val().data));
  }
  return t->reshape_op(a, std::move(s));
}
Var matmul(Var a, Var b) {
  Tape* t = tape_of({&a, &b});
  if (!t) return Var::value(eval_matmul(a.val(), b.val()));
  return t->matmul_op(a, b);
}
Var affine(Var x, Var w, Var b) {
  Tape* t = tape_of({&x, &w, &b});
  if (!t) return Var::value(eval_affine(x.val(), w.val(), b.val()));
  return t->affine_op(x, w, b);
}
Var gather_weighted(Var src, std::shared_ptr<const WeightedGather> table) {
  Tape* t = tape_of({&src});
  if (!t) return Var::value(eval_gather(src.val(), *table));
  return t->gather_op(src, std::move(table));
}
Var conv2d_valid(Var img, Tensor kernel) {
  Tape* t = tape_of({&img});
  if (!t) return Var::value(eval_conv2d_valid(img.val(), kernel));
  return t->conv2d_op(img, std::move(kernel));
}

Var stop_gradient(Var a) { return Var::value(a.val()); }

double gradient_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double h) {
  Tape tape;
  Var x = tape.leaf(point, true);
  Var loss = f(tape, x);
  require(loss.val().is_scalar(), "gradient_check: f must produce a scalar");
  GradMap gm = tape.backward(loss);
  const Tensor& analytic = gm.at(x);

  auto eval_at = [&](const Tensor& p) {
    Tape scratch;
    Var v = scratch.leaf(p, false);
    return f(scratch, v).val().item();
  };

  double max_rel = 0.0;
  Tensor p = point;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double orig = p.data[i];
    p.data[i] = orig + h;
    const double fp = eval_at(p);
    p.data[i] = orig - h;
    const double fm = eval_at(p);
    p.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double rel = std::fabs(analytic.data[i] - fd) / (std::fabs(fd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace mh3d::diff
