#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "psr/errors.hpp"
#include "psr/rng.hpp"

namespace psr {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
};

// Dense f64 tensor handle. Copies are shallow (shared storage); ops return
// fresh tensors. Gradients live on the impl and are populated by backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi);
  static Tensor normal(const Shape& shape, Rng& rng, double mean, double stddev);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const;
  double at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void ensure_zero_grad();  // allocate (if absent) and zero-fill
  void clear_grad() { impl_->grad.clear(); }

  // Deep copy of values; detached from any tape, requires_grad=false.
  Tensor clone_detached() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor wrap_impl(std::shared_ptr<TensorImpl>);
};

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl);

// Reverse-mode tape. Construction activates it for the current thread;
// destruction restores the previous one. Nodes are recorded in topological
// order, so a single reverse sweep visits each exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::vector<std::shared_ptr<TensorImpl>> parents,
              std::shared_ptr<TensorImpl> result, std::function<void()> backward_fn);

  void run_backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::shared_ptr<TensorImpl> result;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Suspends tape recording for its scope (inference / detached evaluation).
class NoTape {
 public:
  NoTape();
  ~NoTape();
  NoTape(const NoTape&) = delete;
  NoTape& operator=(const NoTape&) = delete;

 private:
  Tape* saved_;
};

enum class EwKind { Add, Sub, Mul, Div, Relu, Sigmoid, Tanh, Exp, Log, Neg, ClampMin, Sqrt };

// Binary kinds broadcast under trailing-dimension rules (size-1 stretches).
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor* b = nullptr, double arg = 0.0);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
Tensor sqrt(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes, bool keepdims);
Tensor sum_all(const Tensor& a);   // scalar
Tensor mean_all(const Tensor& a);  // scalar
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice_axis(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor slice0(const Tensor& a, int64_t start, int64_t len);  // along axis 0

void backward(const Tensor& loss);
void zero_grad(const std::vector<Tensor>& params);

struct AdamState {
  int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<std::vector<double>> m, v;
};

// Standard Adam with bias correction; zeroes grads after the update.
void adam_step(std::vector<Tensor>& params, AdamState& state);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr);
  void step() { adam_step(params_, state_); }
  void zero_grad() { psr::zero_grad(params_); }
  int64_t step_count() const { return state_.step; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

// Max relative error between analytic gradient and central finite differences:
// max_i |g_an - g_fd| / max(1e-8, |g_fd|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

// Clears requires_grad on the given tensors for its scope; activations still
// flow through them, but no parameter gradients accumulate.
class FreezeParams {
 public:
  explicit FreezeParams(const std::vector<Tensor>& params);
  ~FreezeParams();
  FreezeParams(const FreezeParams&) = delete;
  FreezeParams& operator=(const FreezeParams&) = delete;

 private:
  std::vector<Tensor> params_;
  std::vector<bool> saved_;
};

}  // namespace psr
