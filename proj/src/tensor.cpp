#include "deshadow/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace deshadow {

namespace {

thread_local std::vector<Tape*> g_tapes;

void check_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw DomainError(std::string(op) + ": non-finite value produced");
    }
  }
}

bool taping(std::initializer_list<const Tensor*> inputs) {
  if (g_tapes.empty()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void record_op(std::function<void()> fn) {
  g_tapes.back()->record(std::move(fn));
}

std::vector<std::size_t> natural_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t d = s.size(); d-- > 0;) {
    st[d] = acc;
    acc *= s[d];
  }
  return st;
}

// Walks `shape` in row-major order, tracking K extra offsets that advance by
// per-dimension stride maps (0 strides realize broadcasting).
template <std::size_t K, class F>
void iterate_mapped(const Shape& shape,
                    const std::array<const std::size_t*, K>& maps, F&& body) {
  const std::size_t r = shape.size();
  const std::size_t n = shape_numel(shape);
  std::array<std::size_t, K> offs{};
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t i = 0; i < n; ++i) {
    body(i, offs);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      for (std::size_t k = 0; k < K; ++k) offs[k] += maps[k][d];
      if (idx[d] < shape[d]) break;
      for (std::size_t k = 0; k < K; ++k) offs[k] -= maps[k][d] * shape[d];
      idx[d] = 0;
    }
  }
}

struct BPlan {
  Shape out;
  std::vector<std::size_t> ma, mb;  // out-frame stride maps for both inputs
  bool same = false;                // identical shapes: no index mapping needed
};

BPlan make_bplan(const char* op, const Shape& a, const Shape& b) {
  BPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < ra ? a[ra - 1 - i] : 1;
    const std::size_t db = i < rb ? b[rb - 1 - i] : 1;
    std::size_t d;
    if (da == db) {
      d = da;
    } else if (da == 1) {
      d = db;
    } else if (db == 1) {
      d = da;
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    }
    p.out[r - 1 - i] = d;
  }
  const auto sa = natural_strides(a);
  const auto sb = natural_strides(b);
  p.ma.assign(r, 0);
  p.mb.assign(r, 0);
  for (std::size_t d = 0; d < r; ++d) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(d) -
                              static_cast<std::ptrdiff_t>(r - ra);
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(d) -
                              static_cast<std::ptrdiff_t>(r - rb);
    if (ia >= 0 && a[ia] == p.out[d]) p.ma[d] = sa[ia];
    if (ib >= 0 && b[ib] == p.out[d]) p.mb[d] = sb[ib];
  }
  return p;
}

Tensor make_result(Shape shape, std::vector<double> data, bool rg) {
  Tensor t;
  t.impl = std::make_shared<detail::TensorImpl>();
  t.impl->shape = std::move(shape);
  t.impl->data = std::move(data);
  t.impl->requires_grad = rg;
  return t;
}

// f(x) -> y, df(x, y) -> dy/dx
template <class F, class DF>
Tensor unary_impl(const char* name, const Tensor& a, F f, DF df) {
  const bool rg = taping({&a});
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.impl->data[i]);
  check_finite(name, out);
  Tensor y = make_result(a.shape(), std::move(out), rg);
  if (rg) {
    auto ai = a.impl;
    auto yi = y.impl;
    record_op([ai, yi, df]() {
      if (yi->grad.empty()) return;
      ai->ensure_grad();
      const std::size_t n = ai->data.size();
      for (std::size_t i = 0; i < n; ++i) {
        ai->grad[i] += yi->grad[i] * df(ai->data[i], yi->data[i]);
      }
    });
  }
  return y;
}

// fwd(a, b) -> y; da(g, a, b), db(g, a, b) -> gradient contributions
template <class F, class DA, class DB>
Tensor binary_impl(const char* name, const Tensor& a, const Tensor& b, F fwd,
                   DA da, DB db) {
  BPlan plan = make_bplan(name, a.shape(), b.shape());
  const bool rg = taping({&a, &b});
  const double* pa = a.impl->data.data();
  const double* pb = b.impl->data.data();
  std::vector<double> out(shape_numel(plan.out));
  if (plan.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    std::array<const std::size_t*, 2> maps = {plan.ma.data(), plan.mb.data()};
    iterate_mapped<2>(plan.out, maps,
                      [&](std::size_t i, const std::array<std::size_t, 2>& o) {
                        out[i] = fwd(pa[o[0]], pb[o[1]]);
                      });
  }
  check_finite(name, out);
  Tensor y = make_result(plan.out, std::move(out), rg);
  if (rg) {
    auto ai = a.impl;
    auto bi = b.impl;
    auto yi = y.impl;
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    record_op([ai, bi, yi, plan = std::move(plan), da, db, need_a, need_b]() {
      if (yi->grad.empty()) return;
      if (need_a) ai->ensure_grad();
      if (need_b) bi->ensure_grad();
      const double* pa = ai->data.data();
      const double* pb = bi->data.data();
      const double* g = yi->grad.data();
      if (plan.same) {
        const std::size_t n = yi->data.size();
        for (std::size_t i = 0; i < n; ++i) {
          if (need_a) ai->grad[i] += da(g[i], pa[i], pb[i]);
          if (need_b) bi->grad[i] += db(g[i], pa[i], pb[i]);
        }
      } else {
        std::array<const std::size_t*, 2> maps = {plan.ma.data(),
                                                  plan.mb.data()};
        iterate_mapped<2>(
            plan.out, maps,
            [&](std::size_t i, const std::array<std::size_t, 2>& o) {
              if (need_a) ai->grad[o[0]] += da(g[i], pa[o[0]], pb[o[1]]);
              if (need_b) bi->grad[o[1]] += db(g[i], pa[o[0]], pb[o[1]]);
            });
      }
    });
  }
  return y;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------- factories

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape.empty()) throw ShapeError("from_data: rank-0 shapes unsupported");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("from_data: zero-sized dimension");
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_data: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  check_finite("from_data", values);
  return make_result(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(v), requires_grad);
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TapeError("tensor has no gradient");
  return impl->grad;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item: tensor has " + std::to_string(size()) +
                     " elements");
  }
  return impl->data[0];
}

void Tensor::set_data(const std::vector<double>& values) {
  if (values.size() != impl->data.size()) {
    throw ShapeError("set_data: size mismatch");
  }
  check_finite("set_data", values);
  impl->data = values;
  impl->grad.clear();
}

Tensor Tensor::detach() const {
  return make_result(impl->shape, impl->data, false);
}

// --------------------------------------------------------------------- tape

Tape::Tape() { g_tapes.push_back(this); }

Tape::~Tape() {
  if (!g_tapes.empty() && g_tapes.back() == this) g_tapes.pop_back();
}

Tape* Tape::active() { return g_tapes.empty() ? nullptr : g_tapes.back(); }

void Tape::backward(const Tensor& root) {
  if (consumed_) throw TapeError("backward: tape already consumed");
  if (!root.defined() || root.size() != 1) {
    throw TapeError("backward: root must be a scalar");
  }
  if (!root.requires_grad()) {
    throw TapeError("backward: root does not require grad");
  }
  consumed_ = true;
  root.impl->ensure_grad();
  root.impl->grad[0] += 1.0;
  for (std::size_t i = ops_.size(); i-- > 0;) ops_[i]();
  ops_.clear();
}

// -------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_impl(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_impl(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_impl(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_impl(
      "div", a, b,
      [](double x, double y) {
        if (y == 0.0) throw DomainError("div: division by zero");
        return x / y;
      },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_impl(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary_impl(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_impl(
      "log", a,
      [](double x) {
        if (x <= 0.0) throw DomainError("log: argument not positive");
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_impl(
      "sqrt", a,
      [](double x) {
        if (x < 0.0) throw DomainError("sqrt: negative argument");
        return std::sqrt(x);
      },
      // subgradient 0 at the origin
      [](double x, double y) { return x > 0.0 ? 0.5 / y : 0.0; });
}

Tensor sin(const Tensor& a) {
  return unary_impl(
      "sin", a, [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary_impl(
      "cos", a, [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

Tensor arccos(const Tensor& a) {
  return unary_impl(
      "arccos", a,
      [](double x) {
        if (std::fabs(x) > 1.0 + 1e-9) {
          throw DomainError("arccos: argument outside [-1,1]");
        }
        return std::acos(std::clamp(x, -1.0, 1.0));
      },
      [](double x, double) {
        const double c = std::clamp(x, -(1.0 - 1e-12), 1.0 - 1e-12);
        return -1.0 / std::sqrt(1.0 - c * c);
      });
}

Tensor abs(const Tensor& a) {
  return unary_impl(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& a, double p) {
  return unary_impl(
      "pow", a,
      [p](double x) {
        if (x < 0.0) throw DomainError("pow: negative base");
        return std::pow(x, p);
      },
      [p](double x, double y) {
        if (x == 0.0) return p == 1.0 ? 1.0 : 0.0;
        return p * y / x;
      });
}

Tensor relu(const Tensor& a) {
  return unary_impl(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary_impl(
      "leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_impl(
      "gelu", a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_impl(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_impl(
      "softplus", a,
      [](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor clamp01(const Tensor& a) {
  return unary_impl(
      "clamp01", a, [](double x) { return std::clamp(x, 0.0, 1.0); },
      [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_impl(
      "add_scalar", a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_impl(
      "mul_scalar", a, [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Tensor unary_custom(const Tensor& a, const std::function<double(double)>& f,
                    const std::function<double(double)>& df, const char* name) {
  return unary_impl(
      name, a, [&f](double x) { return f(x); },
      [df](double x, double) { return df(x); });
}

// ------------------------------------------------------------------- matmul

namespace {

void mm_kernel(const double* A, const double* B, double* C, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] grads -> dA[m,k] += G * B^T
void mm_grad_a(const double* G, const double* B, double* dA, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = B + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      dA[i * k + p] += acc;
    }
  }
}

// dB[k,n] += A^T * G
void mm_grad_b(const double* A, const double* G, double* dB, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      double* drow = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t k2 = sb[sb.size() - 2];
  const std::size_t n = sb[sb.size() - 1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(sa) +
                     " x " + shape_str(sb));
  }
  Shape batch_a(sa.begin(), sa.end() - 2);
  Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_a.empty()) {
    batch = batch_b;
  } else if (batch_b.empty()) {
    batch = batch_a;
  } else {
    throw ShapeError("matmul: batch dimensions differ: " + shape_str(sa) +
                     " x " + shape_str(sb));
  }
  const std::size_t nbatch = shape_numel(batch);
  const std::size_t step_a = batch_a.empty() && !batch.empty() ? 0 : m * k;
  const std::size_t step_b = batch_b.empty() && !batch.empty() ? 0 : k * n;
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const bool rg = taping({&a, &b});
  std::vector<double> out(nbatch * m * n, 0.0);
  for (std::size_t t = 0; t < nbatch; ++t) {
    mm_kernel(a.impl->data.data() + t * step_a,
              b.impl->data.data() + t * step_b, out.data() + t * m * n, m, k,
              n);
  }
  check_finite("matmul", out);
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto ai = a.impl;
    auto bi = b.impl;
    auto yi = y.impl;
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    record_op([ai, bi, yi, m, k, n, nbatch, step_a, step_b, need_a, need_b]() {
      if (yi->grad.empty()) return;
      if (need_a) ai->ensure_grad();
      if (need_b) bi->ensure_grad();
      for (std::size_t t = 0; t < nbatch; ++t) {
        const double* G = yi->grad.data() + t * m * n;
        if (need_a) {
          mm_grad_a(G, bi->data.data() + t * step_b,
                    ai->grad.data() + t * step_a, m, k, n);
        }
        if (need_b) {
          mm_grad_b(ai->data.data() + t * step_a, G,
                    bi->grad.data() + t * step_b, m, k, n);
        }
      }
    });
  }
  return y;
}

// --------------------------------------------------------------- reductions

Tensor reduce(Reduce op, const Tensor& a, std::vector<std::size_t> axes,
              bool keepdims) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (axes.empty()) throw ShapeError("reduce: no axes given");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t ax : axes) {
    if (ax >= r) throw ShapeError("reduce: axis out of range");
  }
  std::vector<bool> reduced(r, false);
  for (std::size_t ax : axes) reduced[ax] = true;

  Shape out_shape;
  for (std::size_t d = 0; d < r; ++d) {
    if (reduced[d]) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(in[d]);
    }
  }
  if (out_shape.empty()) out_shape = {1};

  // out-frame stride per input dim (0 where reduced)
  std::vector<std::size_t> map(r, 0);
  {
    std::size_t acc = 1;
    for (std::size_t d = r; d-- > 0;) {
      if (!reduced[d]) {
        map[d] = acc;
        acc *= in[d];
      }
    }
  }
  std::size_t count = 1;
  for (std::size_t ax : axes) count *= in[ax];

  const bool rg = taping({&a});
  const std::size_t out_n = shape_numel(out_shape);
  const double* src = a.impl->data.data();
  std::vector<double> out;
  std::vector<std::size_t> argmax;
  std::array<const std::size_t*, 1> maps = {map.data()};
  switch (op) {
    case Reduce::Sum:
    case Reduce::Mean: {
      out.assign(out_n, 0.0);
      iterate_mapped<1>(in, maps,
                        [&](std::size_t i, const std::array<std::size_t, 1>& o) {
                          out[o[0]] += src[i];
                        });
      if (op == Reduce::Mean) {
        const double inv = 1.0 / static_cast<double>(count);
        for (double& x : out) x *= inv;
      }
      break;
    }
    case Reduce::Max: {
      out.assign(out_n, -std::numeric_limits<double>::infinity());
      argmax.assign(out_n, 0);
      // strict > keeps the first (row-major) position on ties
      iterate_mapped<1>(in, maps,
                        [&](std::size_t i, const std::array<std::size_t, 1>& o) {
                          if (src[i] > out[o[0]]) {
                            out[o[0]] = src[i];
                            argmax[o[0]] = i;
                          }
                        });
      break;
    }
  }
  check_finite("reduce", out);
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto ai = a.impl;
    auto yi = y.impl;
    record_op([ai, yi, op, in, map = std::move(map), count,
               argmax = std::move(argmax)]() {
      if (yi->grad.empty()) return;
      ai->ensure_grad();
      const double* g = yi->grad.data();
      switch (op) {
        case Reduce::Sum: {
          std::array<const std::size_t*, 1> maps = {map.data()};
          iterate_mapped<1>(
              in, maps, [&](std::size_t i, const std::array<std::size_t, 1>& o) {
                ai->grad[i] += g[o[0]];
              });
          break;
        }
        case Reduce::Mean: {
          const double inv = 1.0 / static_cast<double>(count);
          std::array<const std::size_t*, 1> maps = {map.data()};
          iterate_mapped<1>(
              in, maps, [&](std::size_t i, const std::array<std::size_t, 1>& o) {
                ai->grad[i] += g[o[0]] * inv;
              });
          break;
        }
        case Reduce::Max: {
          for (std::size_t o = 0; o < argmax.size(); ++o) {
            ai->grad[argmax[o]] += g[o];
          }
          break;
        }
      }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& a) {
  std::vector<std::size_t> axes(a.ndim());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(Reduce::Sum, a, std::move(axes), false);
}

Tensor mean_all(const Tensor& a) {
  std::vector<std::size_t> axes(a.ndim());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(Reduce::Mean, a, std::move(axes), false);
}

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  const bool rg = taping({&a});
  Tensor y = make_result(std::move(shape), a.impl->data, rg);
  if (rg) {
    auto ai = a.impl;
    auto yi = y.impl;
    record_op([ai, yi]() {
      if (yi->grad.empty()) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < ai->grad.size(); ++i) {
        ai->grad[i] += yi->grad[i];
      }
    });
  }
  return y;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permute: axes count mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) {
    if (axes[d] >= r || seen[axes[d]]) {
      throw ShapeError("permute: invalid axis list");
    }
    seen[axes[d]] = true;
    out_shape[d] = in[axes[d]];
  }
  // out-frame walk advancing the input offset by the permuted strides
  const auto in_strides = natural_strides(in);
  std::vector<std::size_t> map(r);
  for (std::size_t d = 0; d < r; ++d) map[d] = in_strides[axes[d]];

  const bool rg = taping({&a});
  const double* src = a.impl->data.data();
  std::vector<double> out(a.size());
  std::array<const std::size_t*, 1> maps = {map.data()};
  iterate_mapped<1>(out_shape, maps,
                    [&](std::size_t i, const std::array<std::size_t, 1>& o) {
                      out[i] = src[o[0]];
                    });
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto ai = a.impl;
    auto yi = y.impl;
    record_op([ai, yi, map = std::move(map)]() {
      if (yi->grad.empty()) return;
      ai->ensure_grad();
      std::array<const std::size_t*, 1> maps = {map.data()};
      iterate_mapped<1>(yi->shape, maps,
                        [&](std::size_t i, const std::array<std::size_t, 1>& o) {
                          ai->grad[o[0]] += yi->grad[i];
                        });
    });
  }
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len) {
  const Shape& in = a.shape();
  if (axis >= in.size()) throw ShapeError("slice: axis out of range");
  if (len == 0 || start + len > in[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds axis of size " +
                     std::to_string(in[axis]));
  }
  Shape out_shape = in;
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];

  const bool rg = taping({&a});
  std::vector<double> out(outer * len * inner);
  const double* src = a.impl->data.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * len * inner,
                src + (o * in[axis] + start) * inner,
                len * inner * sizeof(double));
  }
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto ai = a.impl;
    auto yi = y.impl;
    const std::size_t dim = in[axis];
    record_op([ai, yi, outer, inner, dim, start, len]() {
      if (yi->grad.empty()) return;
      ai->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        double* dst = ai->grad.data() + (o * dim + start) * inner;
        const double* g = yi->grad.data() + o * len * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
      }
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat: shape mismatch at axis " + std::to_string(d) +
                         ": " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  bool rg = false;
  if (!g_tapes.empty()) {
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
  }
  std::vector<double> out(outer * total * inner);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t dim = p.shape()[axis];
    const double* src = p.impl->data.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * total + off) * inner,
                  src + o * dim * inner, dim * inner * sizeof(double));
    }
    off += dim;
  }
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    std::vector<bool> needs;
    std::vector<std::size_t> dims;
    for (const Tensor& p : parts) {
      impls.push_back(p.impl);
      needs.push_back(p.requires_grad());
      dims.push_back(p.shape()[axis]);
    }
    auto yi = y.impl;
    record_op([impls = std::move(impls), needs = std::move(needs),
               dims = std::move(dims), yi, outer, inner, total]() {
      if (yi->grad.empty()) return;
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < impls.size(); ++pi) {
        const std::size_t dim = dims[pi];
        if (needs[pi]) {
          impls[pi]->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            double* dst = impls[pi]->grad.data() + o * dim * inner;
            const double* g = yi->grad.data() + (o * total + off) * inner;
            for (std::size_t i = 0; i < dim * inner; ++i) dst[i] += g[i];
          }
        }
        off += dim;
      }
    });
  }
  return y;
}

namespace {

std::size_t reflect_index(std::ptrdiff_t k, std::size_t n) {
  if (k < 0) k = -k;
  if (k >= static_cast<std::ptrdiff_t>(n)) {
    k = 2 * static_cast<std::ptrdiff_t>(n) - 2 - k;
  }
  return static_cast<std::size_t>(k);
}

}  // namespace

Tensor pad2d_reflect(const Tensor& x, std::size_t top, std::size_t bottom,
                     std::size_t left, std::size_t right) {
  const Shape& in = x.shape();
  if (in.size() < 2) throw ShapeError("pad2d_reflect: rank must be >= 2");
  const std::size_t H = in[in.size() - 2];
  const std::size_t W = in[in.size() - 1];
  if (top >= H || bottom >= H || left >= W || right >= W) {
    throw ShapeError("pad2d_reflect: pad must be smaller than the map");
  }
  const std::size_t Ho = H + top + bottom, Wo = W + left + right;
  std::size_t planes = 1;
  for (std::size_t d = 0; d + 2 < in.size(); ++d) planes *= in[d];
  Shape out_shape = in;
  out_shape[in.size() - 2] = Ho;
  out_shape[in.size() - 1] = Wo;

  // per-plane source index for every output cell
  std::vector<std::size_t> src_of(Ho * Wo);
  for (std::size_t i = 0; i < Ho; ++i) {
    const std::size_t si = reflect_index(
        static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(top), H);
    for (std::size_t j = 0; j < Wo; ++j) {
      const std::size_t sj = reflect_index(
          static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(left),
          W);
      src_of[i * Wo + j] = si * W + sj;
    }
  }

  const bool rg = taping({&x});
  std::vector<double> out(planes * Ho * Wo);
  const double* src = x.impl->data.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* sp = src + p * H * W;
    double* op = out.data() + p * Ho * Wo;
    for (std::size_t i = 0; i < Ho * Wo; ++i) op[i] = sp[src_of[i]];
  }
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto xi = x.impl;
    auto yi = y.impl;
    const std::size_t hw = H * W, hwo = Ho * Wo;
    record_op([xi, yi, src_of = std::move(src_of), planes, hw, hwo]() {
      if (yi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        double* gx = xi->grad.data() + p * hw;
        const double* gy = yi->grad.data() + p * hwo;
        for (std::size_t i = 0; i < hwo; ++i) gx[src_of[i]] += gy[i];
      }
    });
  }
  return y;
}

Tensor crop2d(const Tensor& x, std::size_t top, std::size_t left, std::size_t h,
              std::size_t w) {
  const Shape& in = x.shape();
  if (in.size() < 2) throw ShapeError("crop2d: rank must be >= 2");
  const std::size_t H = in[in.size() - 2];
  const std::size_t W = in[in.size() - 1];
  if (h == 0 || w == 0 || top + h > H || left + w > W) {
    throw ShapeError("crop2d: window exceeds map bounds");
  }
  std::size_t planes = 1;
  for (std::size_t d = 0; d + 2 < in.size(); ++d) planes *= in[d];
  Shape out_shape = in;
  out_shape[in.size() - 2] = h;
  out_shape[in.size() - 1] = w;

  const bool rg = taping({&x});
  std::vector<double> out(planes * h * w);
  const double* src = x.impl->data.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < h; ++i) {
      std::memcpy(out.data() + (p * h + i) * w,
                  src + (p * H + top + i) * W + left, w * sizeof(double));
    }
  }
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto xi = x.impl;
    auto yi = y.impl;
    record_op([xi, yi, planes, H, W, h, w, top, left]() {
      if (yi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < h; ++i) {
          double* gx = xi->grad.data() + (p * H + top + i) * W + left;
          const double* gy = yi->grad.data() + (p * h + i) * w;
          for (std::size_t j = 0; j < w; ++j) gx[j] += gy[j];
        }
      }
    });
  }
  return y;
}

Tensor roll2d(const Tensor& x, std::ptrdiff_t shift_h, std::ptrdiff_t shift_w) {
  const Shape& in = x.shape();
  if (in.size() < 2) throw ShapeError("roll2d: rank must be >= 2");
  const std::size_t H = in[in.size() - 2];
  const std::size_t W = in[in.size() - 1];
  std::size_t planes = 1;
  for (std::size_t d = 0; d + 2 < in.size(); ++d) planes *= in[d];
  auto wrap = [](std::ptrdiff_t v, std::size_t n) {
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
  };
  const std::size_t sh = wrap(shift_h, H);
  const std::size_t sw = wrap(shift_w, W);

  const bool rg = taping({&x});
  std::vector<double> out(x.size());
  const double* src = x.impl->data.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < H; ++i) {
      const std::size_t di = (i + sh) % H;
      for (std::size_t j = 0; j < W; ++j) {
        out[(p * H + di) * W + (j + sw) % W] = src[(p * H + i) * W + j];
      }
    }
  }
  Tensor y = make_result(in, std::move(out), rg);
  if (rg) {
    auto xi = x.impl;
    auto yi = y.impl;
    record_op([xi, yi, planes, H, W, sh, sw]() {
      if (yi->grad.empty()) return;
      xi->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < H; ++i) {
          const std::size_t di = (i + sh) % H;
          for (std::size_t j = 0; j < W; ++j) {
            xi->grad[(p * H + i) * W + j] +=
                yi->grad[(p * H + di) * W + (j + sw) % W];
          }
        }
      }
    });
  }
  return y;
}

Tensor index_rows(const Tensor& table, const std::vector<std::size_t>& rows) {
  const Shape& in = table.shape();
  if (in.size() != 2) throw ShapeError("index_rows: table must be rank 2");
  const std::size_t R = in[0], C = in[1];
  for (std::size_t r : rows) {
    if (r >= R) throw ShapeError("index_rows: row index out of range");
  }
  const bool rg = taping({&table});
  std::vector<double> out(rows.size() * C);
  const double* src = table.impl->data.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::memcpy(out.data() + i * C, src + rows[i] * C, C * sizeof(double));
  }
  Tensor y = make_result({rows.size(), C}, std::move(out), rg);
  if (rg) {
    auto ti = table.impl;
    auto yi = y.impl;
    record_op([ti, yi, rows, C]() {
      if (yi->grad.empty()) return;
      ti->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        double* dst = ti->grad.data() + rows[i] * C;
        const double* g = yi->grad.data() + i * C;
        for (std::size_t j = 0; j < C; ++j) dst[j] += g[j];
      }
    });
  }
  return y;
}

// ------------------------------------------------------------------- conv2d

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sw.size() != 4) throw ShapeError("conv2d: weight must be rank 4");
  if (sx.size() != 3 && sx.size() != 4) {
    throw ShapeError("conv2d: input must be rank 3 or 4");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const bool batched = sx.size() == 4;
  const std::size_t N = batched ? sx[0] : 1;
  const std::size_t Ci = sx[sx.size() - 3];
  const std::size_t H = sx[sx.size() - 2];
  const std::size_t W = sx[sx.size() - 1];
  const std::size_t Co = sw[0], kh = sw[2], kw = sw[3];
  if (sw[1] != Ci) {
    throw ShapeError("conv2d: channel mismatch: input " + shape_str(sx) +
                     ", weight " + shape_str(sw));
  }
  if (bias.shape() != Shape{Co}) {
    throw ShapeError("conv2d: bias must have shape [out_channels]");
  }
  if (H + 2 * pad < kh || W + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  Shape out_shape = batched ? Shape{N, Co, Ho, Wo} : Shape{Co, Ho, Wo};

  const bool rg = taping({&x, &w, &bias});
  std::vector<double> out(N * Co * Ho * Wo);
  const double* px = x.impl->data.data();
  const double* pw = w.impl->data.data();
  const double* pb = bias.impl->data.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          double acc = pb[co];
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            for (std::size_t u = 0; u < kh; ++u) {
              const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(
                  ho * stride + u) - static_cast<std::ptrdiff_t>(pad);
              if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t v = 0; v < kw; ++v) {
                const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(
                    wo * stride + v) - static_cast<std::ptrdiff_t>(pad);
                if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += px[((n * Ci + ci) * H + hi) * W + wi] *
                       pw[((co * Ci + ci) * kh + u) * kw + v];
              }
            }
          }
          out[((n * Co + co) * Ho + ho) * Wo + wo] = acc;
        }
      }
    }
  }
  check_finite("conv2d", out);
  Tensor y = make_result(std::move(out_shape), std::move(out), rg);
  if (rg) {
    auto xi = x.impl;
    auto wi_ = w.impl;
    auto bi = bias.impl;
    auto yi = y.impl;
    const bool need_x = x.requires_grad();
    const bool need_w = w.requires_grad();
    const bool need_b = bias.requires_grad();
    record_op([xi, wi_, bi, yi, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad,
               need_x, need_w, need_b]() {
      if (yi->grad.empty()) return;
      if (need_x) xi->ensure_grad();
      if (need_w) wi_->ensure_grad();
      if (need_b) bi->ensure_grad();
      const double* px = xi->data.data();
      const double* pw = wi_->data.data();
      const double* gy = yi->grad.data();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Co; ++co) {
          for (std::size_t ho = 0; ho < Ho; ++ho) {
            for (std::size_t wo = 0; wo < Wo; ++wo) {
              const double g = gy[((n * Co + co) * Ho + ho) * Wo + wo];
              if (g == 0.0) continue;
              if (need_b) bi->grad[co] += g;
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                for (std::size_t u = 0; u < kh; ++u) {
                  const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(
                      ho * stride + u) - static_cast<std::ptrdiff_t>(pad);
                  if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t v = 0; v < kw; ++v) {
                    const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(
                        wo * stride + v) - static_cast<std::ptrdiff_t>(pad);
                    if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) {
                      continue;
                    }
                    const std::size_t xoff = ((n * Ci + ci) * H + hi) * W + wi;
                    const std::size_t woff =
                        ((co * Ci + ci) * kh + u) * kw + v;
                    if (need_x) xi->grad[xoff] += g * pw[woff];
                    if (need_w) wi_->grad[woff] += g * px[xoff];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor softmax_lastdim(const Tensor& a) {
  const std::size_t last = a.ndim() - 1;
  // shift by a constant (detached max) for stability; softmax is invariant
  Tensor m = reduce(Reduce::Max, a, {last}, true).detach();
  Tensor e = exp(sub(a, m));
  Tensor s = reduce(Reduce::Sum, e, {last}, true);
  return div(e, s);
}

// --------------------------------------------------------------------- adam

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ShapeError("adam_step: state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& impl = *params[i].impl;
    if (impl.grad.size() != impl.data.size()) {
      throw TapeError("adam_step: parameter " + std::to_string(i) +
                      " has no gradient");
    }
    for (double g : impl.grad) {
      if (!std::isfinite(g)) {
        throw DomainError("adam_step: non-finite gradient in parameter " +
                          std::to_string(i));
      }
    }
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& impl = *params[i].impl;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < impl.data.size(); ++j) {
      const double g = impl.grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      impl.data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    check_finite("adam_step", impl.data);
    impl.grad.clear();
  }
}

}  // namespace deshadow
