#include "psr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace psr {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_finite(const std::vector<double>& data, const char* op) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

// Strides of a shape broadcast to `out` (right-aligned); stretched axes get 0.
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  const size_t r = out.size();
  const size_t off = r - shape.size();
  std::vector<int64_t> strides(r, 0);
  int64_t s = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    if (shape[i] == out[i + off]) {
      strides[i + off] = s;
    } else if (shape[i] == 1) {
      strides[i + off] = 0;
    } else {
      throw ShapeError("shapes " + shape_str(shape) + " and " + shape_str(out) +
                       " are not broadcastable");
    }
    s *= shape[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || db == 1) {
      out[i] = da;
    } else if (da == 1) {
      out[i] = db;
    } else {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
  }
  return out;
}

// Visits every element of `out_shape`, handing the two source offsets to fn.
template <typename Fn>
void for_each_pair(const Shape& out_shape, const std::vector<int64_t>& sa,
                   const std::vector<int64_t>& sb, Fn&& fn) {
  const int64_t total = shape_numel(out_shape);
  const size_t r = out_shape.size();
  std::vector<int64_t> idx(r, 0);
  int64_t a_off = 0, b_off = 0;
  for (int64_t i = 0; i < total; ++i) {
    fn(i, a_off, b_off);
    for (size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      a_off += sa[ax];
      b_off += sb[ax];
      if (idx[ax] < out_shape[ax]) break;
      a_off -= sa[ax] * out_shape[ax];
      b_off -= sb[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

static void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("shape must be nonempty");
  for (int64_t d : shape) {
    if (d < 1) throw ShapeError("all dims must be >= 1, got " + shape_str(shape));
  }
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  return wrap_impl(std::move(impl));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values) {
  validate_shape(shape);
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  return wrap_impl(std::move(impl));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t = zeros(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(const Shape& shape, Rng& rng, double mean, double stddev) {
  Tensor t = zeros(shape);
  for (double& v : t.values()) v = mean + stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a scalar, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw ShapeError("at(): wrong index rank");
  int64_t off = 0;
  size_t ax = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= impl_->shape[ax]) throw IndexError("at(): index out of range");
    off = off * impl_->shape[ax] + i;
    ++ax;
  }
  return impl_->data[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::vector<double>& Tensor::grad() {
  if (impl_->grad.empty()) throw StateError("gradient absent; run backward() first");
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw StateError("gradient absent; run backward() first");
  return impl_->grad;
}

void Tensor::ensure_zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::clone_detached() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return wrap_impl(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> parents,
                  std::shared_ptr<TensorImpl> result, std::function<void()> backward_fn) {
  nodes_.push_back(Node{std::move(parents), std::move(result), std::move(backward_fn)});
}

void Tape::run_backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  }
  // Allocate gradient buffers: every node result, plus every requires_grad
  // leaf seen as a parent. Existing leaf grads are kept (accumulation).
  for (Node& node : nodes_) {
    if (node.result->grad.empty()) node.result->grad.assign(node.result->data.size(), 0.0);
    for (auto& p : node.parents) {
      if (p->requires_grad && p->grad.empty()) p->grad.assign(p->data.size(), 0.0);
    }
  }
  if (loss.impl()->grad.empty()) loss.impl()->grad.assign(1, 0.0);
  loss.impl()->grad[0] += 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) nodes_[i].fn();
}

NoTape::NoTape() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoTape::~NoTape() { g_active_tape = saved_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw StateError("backward() requires an active tape");
  tape->run_backward(loss);
}

void zero_grad(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) const_cast<Tensor&>(p).ensure_zero_grad();
}

namespace {

void maybe_record(const std::vector<Tensor>& parents, Tensor& result, std::function<void()> fn) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool any = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) {
      any = true;
      break;
    }
  }
  if (!any) return;
  result.impl()->requires_grad = true;
  std::vector<std::shared_ptr<TensorImpl>> pi;
  pi.reserve(parents.size());
  for (const Tensor& p : parents) pi.push_back(p.impl());
  tape->record(std::move(pi), result.impl(), std::move(fn));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b, double arg) {
  const bool binary =
      kind == EwKind::Add || kind == EwKind::Sub || kind == EwKind::Mul || kind == EwKind::Div;
  if (binary) {
    if (b == nullptr) throw ShapeError("binary elementwise op requires two operands");
    const Shape out_shape = broadcast_shape(a.shape(), b->shape());
    Tensor out = Tensor::zeros(out_shape);
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b->shape(), out_shape);
    const auto& av = a.values();
    const auto& bv = b->values();
    auto& ov = out.values();
    switch (kind) {
      case EwKind::Add:
        for_each_pair(out_shape, sa, sb,
                      [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] + bv[ib]; });
        break;
      case EwKind::Sub:
        for_each_pair(out_shape, sa, sb,
                      [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] - bv[ib]; });
        break;
      case EwKind::Mul:
        for_each_pair(out_shape, sa, sb,
                      [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] * bv[ib]; });
        break;
      case EwKind::Div:
        for_each_pair(out_shape, sa, sb,
                      [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = av[ia] / bv[ib]; });
        check_finite(ov, "div");
        break;
      default:
        break;
    }
    Tensor bt = *b;
    std::function<void()> fn = [kind, ai = a.impl(), bi = bt.impl(), oi = out.impl(), out_shape,
                                sa, sb]() {
      const auto& g = oi->grad;
      switch (kind) {
        case EwKind::Add:
          for_each_pair(out_shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
            if (!ai->grad.empty()) ai->grad[ia] += g[i];
            if (!bi->grad.empty()) bi->grad[ib] += g[i];
          });
          break;
        case EwKind::Sub:
          for_each_pair(out_shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
            if (!ai->grad.empty()) ai->grad[ia] += g[i];
            if (!bi->grad.empty()) bi->grad[ib] -= g[i];
          });
          break;
        case EwKind::Mul:
          for_each_pair(out_shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
            if (!ai->grad.empty()) ai->grad[ia] += g[i] * bi->data[ib];
            if (!bi->grad.empty()) bi->grad[ib] += g[i] * ai->data[ia];
          });
          break;
        case EwKind::Div:
          for_each_pair(out_shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
            const double bd = bi->data[ib];
            if (!ai->grad.empty()) ai->grad[ia] += g[i] / bd;
            if (!bi->grad.empty()) bi->grad[ib] -= g[i] * ai->data[ia] / (bd * bd);
          });
          break;
        default:
          break;
      }
    };
    maybe_record({a, bt}, out, std::move(fn));
    return out;
  }

  // Unary kinds.
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  const size_t n = av.size();
  switch (kind) {
    case EwKind::Relu:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
      break;
    case EwKind::Sigmoid:
      for (size_t i = 0; i < n; ++i) ov[i] = 1.0 / (1.0 + std::exp(-av[i]));
      break;
    case EwKind::Tanh:
      for (size_t i = 0; i < n; ++i) ov[i] = std::tanh(av[i]);
      break;
    case EwKind::Exp:
      for (size_t i = 0; i < n; ++i) ov[i] = std::exp(av[i]);
      check_finite(ov, "exp");
      break;
    case EwKind::Log:
      for (size_t i = 0; i < n; ++i) ov[i] = std::log(av[i]);
      check_finite(ov, "log");
      break;
    case EwKind::Neg:
      for (size_t i = 0; i < n; ++i) ov[i] = -av[i];
      break;
    case EwKind::ClampMin:
      for (size_t i = 0; i < n; ++i) ov[i] = av[i] > arg ? av[i] : arg;
      break;
    case EwKind::Sqrt:
      for (size_t i = 0; i < n; ++i) ov[i] = std::sqrt(av[i]);
      check_finite(ov, "sqrt");
      break;
    default:
      throw ShapeError("unary elementwise op given binary kind");
  }
  std::function<void()> fn = [kind, arg, ai = a.impl(), oi = out.impl()]() {
    if (ai->grad.empty()) return;
    const auto& g = oi->grad;
    const size_t n = g.size();
    switch (kind) {
      case EwKind::Relu:
        for (size_t i = 0; i < n; ++i) ai->grad[i] += ai->data[i] > 0.0 ? g[i] : 0.0;
        break;
      case EwKind::Sigmoid:
        for (size_t i = 0; i < n; ++i) {
          const double y = oi->data[i];
          ai->grad[i] += g[i] * y * (1.0 - y);
        }
        break;
      case EwKind::Tanh:
        for (size_t i = 0; i < n; ++i) {
          const double y = oi->data[i];
          ai->grad[i] += g[i] * (1.0 - y * y);
        }
        break;
      case EwKind::Exp:
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * oi->data[i];
        break;
      case EwKind::Log:
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i] / ai->data[i];
        break;
      case EwKind::Neg:
        for (size_t i = 0; i < n; ++i) ai->grad[i] -= g[i];
        break;
      case EwKind::ClampMin:
        for (size_t i = 0; i < n; ++i) ai->grad[i] += ai->data[i] > arg ? g[i] : 0.0;
        break;
      case EwKind::Sqrt:
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * 0.5 / oi->data[i];
        break;
      default:
        break;
    }
  };
  maybe_record({a}, out, std::move(fn));
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Add, a, &b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Sub, a, &b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Mul, a, &b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Div, a, &b); }
Tensor relu(const Tensor& a) { return elementwise(EwKind::Relu, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(EwKind::Sigmoid, a); }
Tensor tanh(const Tensor& a) { return elementwise(EwKind::Tanh, a); }
Tensor exp(const Tensor& a) { return elementwise(EwKind::Exp, a); }
Tensor log(const Tensor& a) { return elementwise(EwKind::Log, a); }
Tensor neg(const Tensor& a) { return elementwise(EwKind::Neg, a); }
Tensor clamp_min(const Tensor& a, double lo) { return elementwise(EwKind::ClampMin, a, nullptr, lo); }
Tensor sqrt(const Tensor& a) { return elementwise(EwKind::Sqrt, a); }

Tensor add_scalar(const Tensor& a, double s) {
  Tensor sc = Tensor::scalar(s);
  return add(a, sc);
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor sc = Tensor::scalar(s);
  return mul(a, sc);
}

// ---------------------------------------------------------------------------
// Reductions and linear algebra

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  const int r = a.rank();
  std::vector<bool> reduced(static_cast<size_t>(r), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r) throw ShapeError("reduce_sum: axis " + std::to_string(ax) + " out of range");
    if (reduced[static_cast<size_t>(ax)]) throw ShapeError("reduce_sum: duplicate axis");
    reduced[static_cast<size_t>(ax)] = true;
  }
  if (axes.empty()) {
    // Empty reduction is the identity (copy).
    Tensor out = Tensor::from_data(a.shape(), a.values());
    std::function<void()> fn = [ai = a.impl(), oi = out.impl()]() {
      if (ai->grad.empty()) return;
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    };
    maybe_record({a}, out, std::move(fn));
    return out;
  }

  Shape kept_shape = a.shape();
  for (int ax : axes) kept_shape[static_cast<size_t>(ax)] = 1;
  Shape out_shape;
  if (keepdims) {
    out_shape = kept_shape;
  } else {
    for (int i = 0; i < r; ++i) {
      if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(a.dim(i));
    }
    if (out_shape.empty()) out_shape = {1};
  }

  // Map each input element to its output slot.
  std::vector<int64_t> out_strides(static_cast<size_t>(r), 0);
  {
    int64_t s = 1;
    for (int i = r; i-- > 0;) {
      if (!reduced[static_cast<size_t>(i)]) {
        out_strides[static_cast<size_t>(i)] = s;
        s *= a.dim(i);
      }
    }
  }

  Tensor out = Tensor::zeros(out_shape);
  const auto& av = a.values();
  auto& ov = out.values();
  const Shape& ash = a.shape();
  {
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t o = 0;
    for (size_t i = 0; i < av.size(); ++i) {
      ov[static_cast<size_t>(o)] += av[i];
      for (int ax = r; ax-- > 0;) {
        ++idx[static_cast<size_t>(ax)];
        o += out_strides[static_cast<size_t>(ax)];
        if (idx[static_cast<size_t>(ax)] < ash[static_cast<size_t>(ax)]) break;
        o -= out_strides[static_cast<size_t>(ax)] * ash[static_cast<size_t>(ax)];
        idx[static_cast<size_t>(ax)] = 0;
      }
    }
  }
  std::function<void()> fn = [ai = a.impl(), oi = out.impl(), out_strides, r]() {
    if (ai->grad.empty()) return;
    const Shape& ash = ai->shape;
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t o = 0;
    for (size_t i = 0; i < ai->grad.size(); ++i) {
      ai->grad[i] += oi->grad[static_cast<size_t>(o)];
      for (int ax = r; ax-- > 0;) {
        ++idx[static_cast<size_t>(ax)];
        o += out_strides[static_cast<size_t>(ax)];
        if (idx[static_cast<size_t>(ax)] < ash[static_cast<size_t>(ax)]) break;
        o -= out_strides[static_cast<size_t>(ax)] * ash[static_cast<size_t>(ax)];
        idx[static_cast<size_t>(ax)] = 0;
      }
    }
  };
  maybe_record({a}, out, std::move(fn));
  return out;
}

Tensor sum_all(const Tensor& a) {
  std::vector<int> axes(static_cast<size_t>(a.rank()));
  for (int i = 0; i < a.rank(); ++i) axes[static_cast<size_t>(i)] = i;
  return reduce_sum(a, axes, false);
}

Tensor mean_all(const Tensor& a) { return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double x = av[static_cast<size_t>(i * k + p)];
      if (x == 0.0) continue;
      for (int64_t j = 0; j < n; ++j) {
        ov[static_cast<size_t>(i * n + j)] += x * bv[static_cast<size_t>(p * n + j)];
      }
    }
  }
  std::function<void()> fn = [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n]() {
    const auto& g = oi->grad;
    if (!ai->grad.empty()) {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double go = g[static_cast<size_t>(i * n + j)];
          if (go == 0.0) continue;
          for (int64_t p = 0; p < k; ++p)
            ai->grad[static_cast<size_t>(i * k + p)] += go * bi->data[static_cast<size_t>(p * n + j)];
        }
    }
    if (!bi->grad.empty()) {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
          const double x = ai->data[static_cast<size_t>(i * k + p)];
          if (x == 0.0) continue;
          for (int64_t j = 0; j < n; ++j)
            bi->grad[static_cast<size_t>(p * n + j)] += x * g[static_cast<size_t>(i * n + j)];
        }
    }
  };
  maybe_record({a, b}, out, std::move(fn));
  return out;
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  validate_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from_data(shape, a.values());
  std::function<void()> fn = [ai = a.impl(), oi = out.impl()]() {
    if (ai->grad.empty()) return;
    for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  };
  maybe_record({a}, out, std::move(fn));
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.dim(i) != out_shape[static_cast<size_t>(i)]) {
        throw ShapeError("concat: dim mismatch at axis " + std::to_string(i));
      }
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

  Tensor out = Tensor::zeros(out_shape);
  auto& ov = out.values();
  const int64_t out_row = axis_total * inner;
  int64_t axis_off = 0;
  for (const Tensor& p : parts) {
    const auto& pv = p.values();
    const int64_t p_row = p.dim(axis) * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(pv.begin() + o * p_row, pv.begin() + (o + 1) * p_row,
                ov.begin() + o * out_row + axis_off * inner);
    }
    axis_off += p.dim(axis);
  }

  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) impls.push_back(p.impl());
  std::vector<int64_t> axis_dims;
  for (const Tensor& p : parts) axis_dims.push_back(p.dim(axis));
  std::function<void()> fn = [impls, oi = out.impl(), outer, inner, out_row, axis_dims]() {
    int64_t axis_off = 0;
    for (size_t t = 0; t < impls.size(); ++t) {
      const int64_t p_row = axis_dims[t] * inner;
      if (!impls[t]->grad.empty()) {
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = oi->grad.data() + o * out_row + axis_off * inner;
          double* dst = impls[t]->grad.data() + o * p_row;
          for (int64_t i = 0; i < p_row; ++i) dst[i] += src[i];
        }
      }
      axis_off += axis_dims[t];
    }
  };
  Tensor out2 = out;
  maybe_record(parts, out2, std::move(fn));
  return out;
}

Tensor slice_axis(const Tensor& a, int axis, int64_t start, int64_t len) {
  if (axis < 0 || axis >= a.rank()) throw ShapeError("slice_axis: bad axis");
  if (start < 0 || len < 1 || start + len > a.dim(axis)) {
    throw ShapeError("slice_axis: range out of bounds");
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const int64_t in_row = a.dim(axis) * inner;
  const int64_t out_row = len * inner;

  Tensor out = Tensor::zeros(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(a.values().begin() + o * in_row + start * inner,
              a.values().begin() + o * in_row + (start + len) * inner,
              out.values().begin() + o * out_row);
  }
  std::function<void()> fn = [ai = a.impl(), oi = out.impl(), outer, inner, in_row, out_row,
                              start]() {
    if (ai->grad.empty()) return;
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = oi->grad.data() + o * out_row;
      double* dst = ai->grad.data() + o * in_row + start * inner;
      for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
    }
  };
  maybe_record({a}, out, std::move(fn));
  return out;
}

Tensor slice0(const Tensor& a, int64_t start, int64_t len) { return slice_axis(a, 0, start, len); }

// ---------------------------------------------------------------------------
// Adam

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].values().size(), 0.0);
      state.v[i].assign(params[i].values().size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw StateError("adam_step: state/param count mismatch");
  for (const Tensor& p : params) {
    if (!p.has_grad()) throw StateError("adam_step: parameter missing gradient");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].values();
    auto& g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) throw StateError("adam_step: moment shape mismatch");
    for (size_t j = 0; j < data.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    std::fill(g.begin(), g.end(), 0.0);
  }
}

Adam::Adam(std::vector<Tensor> params, double lr) : params_(std::move(params)) { state_.lr = lr; }

FreezeParams::FreezeParams(const std::vector<Tensor>& params) : params_(params) {
  saved_.reserve(params_.size());
  for (Tensor& p : params_) {
    saved_.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
}

FreezeParams::~FreezeParams() {
  for (size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor xg = x.clone_detached();
  xg.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y = f(xg);
    if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    tape.run_backward(y);
    analytic = xg.impl()->grad;
    if (analytic.empty()) analytic.assign(x.values().size(), 0.0);
  }
  Tensor xf = x.clone_detached();
  double max_err = 0.0;
  NoTape guard;
  for (size_t i = 0; i < xf.values().size(); ++i) {
    const double orig = xf.values()[i];
    xf.values()[i] = orig + eps;
    const double fp = f(xf).item();
    xf.values()[i] = orig - eps;
    const double fm = f(xf).item();
    xf.values()[i] = orig;
    const double g_fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - g_fd) / std::max(1e-8, std::abs(g_fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace psr
