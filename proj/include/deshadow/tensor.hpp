#pragma once
// Dense double-precision tensors with tape-based reverse-mode automatic
// differentiation. Conventions:
//   - row-major storage, trailing-dimension (numpy-style) broadcasting
//   - values are immutable after construction except through adam_step
//   - no operation ever stores a non-finite value; domain violations throw
//   - operations record backward rules on the innermost active Tape; with no
//     tape active they are plain value computations (inference mode)

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deshadow/rng.hpp"

namespace deshadow {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  std::size_t ndim() const { return impl->shape.size(); }
  std::size_t size() const { return impl->data.size(); }
  bool requires_grad() const { return impl && impl->requires_grad; }
  bool has_grad() const { return impl && !impl->grad.empty(); }

  std::span<const double> data() const { return impl->data; }
  std::span<const double> grad() const;
  double item() const;                   // scalar tensors only
  double at(std::size_t flat) const { return impl->data[flat]; }

  // leaf mutation; used for parameter setup and checkpoint loading
  void set_requires_grad(bool rg) { impl->requires_grad = rg; }
  void set_data(const std::vector<double>& values);
  void zero_grad() { if (impl) impl->grad.clear(); }

  // value copy detached from any tape
  Tensor detach() const;

  std::shared_ptr<detail::TensorImpl> impl;
};

// Records backward rules of operations executed while it is the innermost
// live Tape on this thread. Single use: backward() consumes it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  std::size_t num_ops() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  // root must be scalar and require grad; replays recorded ops in reverse,
  // accumulating into every reachable requires_grad tensor
  void backward(const Tensor& root);

  static Tape* active();

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// ---- elementwise (trailing-dimension broadcasting for binary ops) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // exact zero divisor -> error
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // x <= 0 -> error
Tensor sqrt(const Tensor& a);  // x < 0 -> error
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor arccos(const Tensor& a);  // |x| > 1 + 1e-9 -> error, else clamped
Tensor abs(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);  // x < 0 -> error; d/dx at 0 := 0
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);  // log(1+e^x), overflow-safe
Tensor clamp01(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// custom differentiable scalar function applied elementwise
Tensor unary_custom(const Tensor& a, const std::function<double(double)>& f,
                    const std::function<double(double)>& df,
                    const char* name = "unary_custom");

// ---- linear algebra ----
// a: [*, m, k], b: [*, k, n]; leading batch dims must match, or either side
// may be rank-2 and is shared across the other's batch
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- reductions ----
enum class Reduce { Sum, Mean, Max };
Tensor reduce(Reduce op, const Tensor& a, std::vector<std::size_t> axes,
              bool keepdims = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- shape ops (all copying; no aliasing) ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// last-two-axes spatial ops; x has shape [..., H, W]
Tensor pad2d_reflect(const Tensor& x, std::size_t top, std::size_t bottom,
                     std::size_t left, std::size_t right);
Tensor crop2d(const Tensor& x, std::size_t top, std::size_t left,
              std::size_t h, std::size_t w);
Tensor roll2d(const Tensor& x, std::ptrdiff_t shift_h, std::ptrdiff_t shift_w);

// gather rows of a [R, C] table; backward scatter-adds
Tensor index_rows(const Tensor& table, const std::vector<std::size_t>& rows);

// x: [C,H,W] or [N,C,H,W]; w: [Cout,Cin,kh,kw]; zero padding
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad);

// softmax over the last axis (composed of primitive ops)
Tensor softmax_lastdim(const Tensor& a);

// ---- optimizer ----
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;  // parallel to the param list
  std::vector<std::vector<double>> v;
};

// bias-corrected Adam update in place; every param must hold a finite grad;
// grads are cleared after the step
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

// operator sugar
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

}  // namespace deshadow
