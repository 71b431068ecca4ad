#include "deshadow/sphere.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace deshadow {

namespace {

// row norms over the last dimension of the raw buffer
void for_each_row(const Tensor& x, auto&& body) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const double* p = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) body(r, p + r * n, n);
}

}  // namespace

void SphereConfig::validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius) || radius > 1e6) {
    throw DomainError("sphere: radius must be in (0, 1e6]");
  }
  if (!(eps_pole > 0.0) || !(eps_pole < 1e-2)) {
    throw DomainError("sphere: eps_pole must be in (0, 1e-2)");
  }
}

namespace sphere_detail {

double u_exact(double t) {
  const double tc = std::clamp(t, -1.0, 1.0);
  const double alpha = std::acos(tc);
  const double s = std::sqrt((1.0 - tc) * (1.0 + tc));
  return alpha / s;
}

double u_series(double t) {
  const double alpha = std::acos(std::clamp(t, -1.0, 1.0));
  return 1.0 + alpha * alpha / 6.0;
}

double sinc_exact(double beta) { return std::sin(beta) / beta; }

double sinc_series(double beta) { return 1.0 - beta * beta / 6.0; }

std::vector<double> project_point(const std::vector<double>& x,
                                  const SphereConfig& cfg) {
  double sq = 0.0;
  for (double v : x) sq += v * v;
  if (sq < 1e-24) throw DomainError("project_to_sphere: zero-length input");
  const double scale = cfg.radius / std::sqrt(sq);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale;
  return out;
}

std::vector<double> log_map_point(const std::vector<double>& x,
                                  const SphereConfig& cfg) {
  if (x.size() < 2) throw ShapeError("log_map: point dimension must be >= 2");
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double norm = std::sqrt(sq);
  if (std::fabs(norm / cfg.radius - 1.0) > 1e-6) {
    throw DomainError("log_map: input is off the sphere");
  }
  const double t = std::clamp(x.back() / cfg.radius, -1.0, 1.0);
  const double alpha = std::acos(t);
  if (alpha >= M_PI - cfg.eps_pole) {
    throw DomainError("log_map: point within eps_pole of the antipode");
  }
  const double u = alpha < cfg.eps_pole ? u_series(t) : u_exact(t);
  std::vector<double> m(x.size() - 1);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = u * x[i];
  return m;
}

std::vector<double> exp_map_point(const std::vector<double>& m,
                                  const SphereConfig& cfg) {
  if (m.empty()) throw ShapeError("exp_map: tangent dimension must be >= 1");
  double sq = 0.0;
  for (double v : m) sq += v * v;
  const double beta = std::sqrt(sq) / cfg.radius;
  const double si = beta < cfg.eps_pole ? sinc_series(beta) : sinc_exact(beta);
  const double co = beta < cfg.eps_pole ? 1.0 - sq / (2.0 * cfg.radius *
                                                      cfg.radius)
                                        : std::cos(beta);
  std::vector<double> out(m.size() + 1);
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] * si;
  out[m.size()] = cfg.radius * co;
  return out;
}

std::vector<double> transform_point(const std::vector<double>& x,
                                    const std::vector<double>& w,
                                    const std::vector<double>& b,
                                    const SphereConfig& cfg) {
  const std::vector<double> m = log_map_point(x, cfg);
  const std::size_t k = m.size();
  if (w.size() != k * k) throw ShapeError("transform: W must be k x k");
  if (b.size() != k) throw ShapeError("transform: b must have length k");
  std::vector<double> lin(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < k; ++j) acc += w[i * k + j] * m[j];
    lin[i] = acc;
  }
  return exp_map_point(lin, cfg);
}

}  // namespace sphere_detail

Tensor project_to_sphere(const Tensor& x, const SphereConfig& cfg) {
  cfg.validate();
  if (x.ndim() < 1 || x.shape().back() < 2) {
    throw ShapeError("project_to_sphere: last dimension must be >= 2");
  }
  for_each_row(x, [](std::size_t r, const double* p, std::size_t n) {
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += p[i] * p[i];
    if (sq < 1e-24) {
      throw DomainError("project_to_sphere: zero-length row " +
                        std::to_string(r));
    }
  });
  const std::size_t last = x.ndim() - 1;
  Tensor sq = reduce(Reduce::Sum, x * x, {last}, true);
  return mul_scalar(div(x, sqrt(sq)), cfg.radius);
}

Tensor log_map(const Tensor& x, const SphereConfig& cfg) {
  cfg.validate();
  if (x.ndim() < 1 || x.shape().back() < 2) {
    throw ShapeError("log_map: last dimension must be >= 2");
  }
  const double r = cfg.radius;
  const double anti = -std::cos(cfg.eps_pole);  // t at the antipodal guard
  for_each_row(x, [&](std::size_t row, const double* p, std::size_t n) {
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += p[i] * p[i];
    if (std::fabs(std::sqrt(sq) / r - 1.0) > 1e-6) {
      throw DomainError("log_map: row " + std::to_string(row) +
                        " is off the sphere");
    }
    if (p[n - 1] / r <= anti) {
      throw DomainError("log_map: row " + std::to_string(row) +
                        " within eps_pole of the antipode");
    }
  });
  const std::size_t last = x.ndim() - 1;
  const std::size_t n = x.shape().back();
  Tensor head = slice(x, last, 0, n - 1);
  Tensor t = mul_scalar(slice(x, last, n - 1, 1), 1.0 / r);
  const double eps = cfg.eps_pole;
  Tensor u = unary_custom(
      t,
      [eps](double tv) {
        const double tc = std::clamp(tv, -1.0, 1.0);
        const double alpha = std::acos(tc);
        return alpha < eps ? sphere_detail::u_series(tc)
                           : sphere_detail::u_exact(tc);
      },
      [eps](double tv) {
        const double tc = std::clamp(tv, -1.0, 1.0);
        const double alpha = std::acos(tc);
        if (alpha < eps) return -1.0 / 3.0;
        const double s = std::sqrt((1.0 - tc) * (1.0 + tc));
        return (alpha * tc - s) / (s * s * s);
      },
      "inv_sinc_acos");
  return mul(head, u);
}

Tensor exp_map(const Tensor& m, const SphereConfig& cfg) {
  cfg.validate();
  if (m.ndim() < 1) throw ShapeError("exp_map: rank must be >= 1");
  const double r = cfg.radius;
  const std::size_t last = m.ndim() - 1;
  // s = ||m||^2 / r^2 keeps everything smooth at the pole (no sqrt(0))
  Tensor s = mul_scalar(reduce(Reduce::Sum, m * m, {last}, true), 1.0 / (r * r));
  const double eps = cfg.eps_pole;
  Tensor si = unary_custom(
      s,
      [eps](double sv) {
        const double beta = std::sqrt(sv);
        return beta < eps ? sphere_detail::sinc_series(beta)
                          : sphere_detail::sinc_exact(beta);
      },
      [eps](double sv) {
        const double beta = std::sqrt(sv);
        if (beta < eps) return -1.0 / 6.0 + sv / 60.0;
        return (beta * std::cos(beta) - std::sin(beta)) /
               (2.0 * beta * beta * beta);
      },
      "sinc_sqrt");
  Tensor co = unary_custom(
      s,
      [eps](double sv) {
        const double beta = std::sqrt(sv);
        return beta < eps ? 1.0 - sv / 2.0 : std::cos(beta);
      },
      [eps](double sv) {
        const double beta = std::sqrt(sv);
        if (beta < eps) return -0.5 + sv / 12.0;
        return -std::sin(beta) / (2.0 * beta);
      },
      "cos_sqrt");
  return concat({mul(m, si), mul_scalar(co, r)}, last);
}

Tensor tangent_linear(const Tensor& m, const Tensor& w, const Tensor& b) {
  if (m.ndim() < 2) throw ShapeError("tangent_linear: rows must be batched");
  const std::size_t k = m.shape().back();
  if (w.shape() != Shape{k, k}) {
    throw ShapeError("tangent_linear: W must be " + std::to_string(k) + "x" +
                     std::to_string(k));
  }
  if (b.shape() != Shape{k}) {
    throw ShapeError("tangent_linear: b must have length " + std::to_string(k));
  }
  return add(matmul(m, permute(w, {1, 0})), b);
}

Tensor sphere_transform(const Tensor& x, const Tensor& w, const Tensor& b,
                        const SphereConfig& cfg) {
  return exp_map(tangent_linear(log_map(x, cfg), w, b), cfg);
}

double geodesic_distance(const Tensor& x, const Tensor& y,
                         const SphereConfig& cfg) {
  cfg.validate();
  if (x.ndim() != 1 || x.shape() != y.shape() || x.size() < 2) {
    throw ShapeError("geodesic_distance: expected two points of equal"
                     " dimension >= 2");
  }
  const double r = cfg.radius;
  for (const Tensor* p : {&x, &y}) {
    double sq = 0.0;
    for (double v : p->data()) sq += v * v;
    if (std::fabs(std::sqrt(sq) / r - 1.0) > 1e-6) {
      throw DomainError("geodesic_distance: input is off the sphere");
    }
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += x.at(i) * y.at(i);
  return r * std::acos(std::clamp(dot / (r * r), -1.0, 1.0));
}

}  // namespace deshadow
