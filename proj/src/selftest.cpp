#include "deshadow/selftest.hpp"

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "deshadow/rng.hpp"
#include "deshadow/sphere.hpp"
#include "deshadow/tensor.hpp"

namespace deshadow {

namespace {

using sphere_detail::exp_map_point;
using sphere_detail::log_map_point;
using sphere_detail::project_point;

struct Checker {
  std::ostream& out;
  int failures = 0;

  void run(const std::string& name, const std::function<void()>& body) {
    try {
      body();
      out << "[ok]   " << name << "\n";
    } catch (const std::exception& e) {
      ++failures;
      out << "[FAIL] " << name << ": " << e.what() << "\n";
    }
  }
};

void expect(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

void expect_finite(const std::vector<double>& v, const std::string& what) {
  for (double x : v) {
    expect(std::isfinite(x), what + " produced a non-finite value");
  }
}

double max_abs_diff(const std::vector<double>& a,
                    const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(a[i] - b[i]));
  }
  return m;
}

}  // namespace

int run_sphere_selftest(double radius, double eps_pole, std::ostream& out) {
  const SphereConfig cfg{radius, eps_pole};
  const double r = radius;
  Checker c{out};
  out << "sphere selftest: radius=" << radius << " eps_pole=" << eps_pole
      << "\n";

  c.run("north pole maps to the tangent origin", [&] {
    std::vector<double> pole = {0.0, 0.0, 0.0, r};
    auto m = log_map_point(pole, cfg);
    expect_finite(m, "log at the pole");
    for (double v : m) expect(std::fabs(v) <= 1e-12 * r, "log(N) != 0");
  });

  c.run("tangent origin maps to the north pole", [&] {
    auto x = exp_map_point({0.0, 0.0, 0.0}, cfg);
    expect_finite(x, "exp at the origin");
    expect(std::fabs(x[0]) <= 1e-12 * r && std::fabs(x[1]) <= 1e-12 * r &&
               std::fabs(x[2]) <= 1e-12 * r && std::fabs(x[3] - r) <= 1e-12 * r,
           "exp(0) != N");
  });

  c.run("series and exact branches agree across the switch", [&] {
    expect(eps_pole > 0.0, "eps_pole must be positive for a branch switch");
    for (int i = 0; i <= 40; ++i) {
      const double alpha = eps_pole * std::pow(10.0, -1.0 + 2.0 * i / 40.0);
      const double t = std::cos(alpha);
      const double du = std::fabs(sphere_detail::u_exact(t) -
                                  sphere_detail::u_series(t));
      expect(std::isfinite(du) && du <= 1e-12,
             "log multiplier branches diverge at alpha=" +
                 std::to_string(alpha));
      const double ds = std::fabs(sphere_detail::sinc_exact(alpha) -
                                  sphere_detail::sinc_series(alpha));
      expect(std::isfinite(ds) && ds <= 1e-12,
             "sinc branches diverge at beta=" + std::to_string(alpha));
      const double dc =
          std::fabs(std::cos(alpha) - (1.0 - alpha * alpha / 2.0));
      expect(std::isfinite(dc) && dc <= 1e-12,
             "cosine branches diverge at beta=" + std::to_string(alpha));
    }
  });

  c.run("exp inverts log on random sphere points", [&] {
    Rng rng(2024);
    for (int trial = 0; trial < 64; ++trial) {
      std::vector<double> z(5);
      for (double& v : z) v = rng.normal();
      auto x = project_point(z, cfg);
      auto back = exp_map_point(log_map_point(x, cfg), cfg);
      expect_finite(back, "roundtrip");
      expect(max_abs_diff(x, back) <= 1e-9 * r, "exp(log(x)) drifted from x");
    }
  });

  c.run("log inverts exp inside the injectivity radius", [&] {
    Rng rng(2025);
    for (int trial = 0; trial < 64; ++trial) {
      std::vector<double> m(4);
      for (double& v : m) v = rng.normal();
      double norm = 0.0;
      for (double v : m) norm += v * v;
      norm = std::sqrt(norm);
      const double target = rng.uniform(1e-9, 0.9 * M_PI * r);
      for (double& v : m) v *= target / norm;
      auto back = log_map_point(exp_map_point(m, cfg), cfg);
      expect_finite(back, "roundtrip");
      expect(max_abs_diff(m, back) <= 1e-9 * std::max(1.0, target),
             "log(exp(m)) drifted from m");
    }
  });

  c.run("affine tangent map matches the worked example", [&] {
    // m = 0.1r * (1,1), W = [[2,0],[0,3]], b = 0.1r * (1,-1):
    // W m + b = 0.1r * (3, 2), which stays inside the injectivity radius
    // for every r, so log(transform(exp(m))) recovers it exactly
    const double s = 0.1 * r;
    std::vector<double> w = {2.0, 0.0, 0.0, 3.0};
    std::vector<double> b = {s, -s};
    auto x = exp_map_point({s, s}, cfg);
    auto y = sphere_detail::transform_point(x, w, b, cfg);
    auto m2 = log_map_point(y, cfg);
    expect_finite(m2, "transform");
    expect(std::fabs(m2[0] - 3.0 * s) <= 1e-9 * std::max(1.0, r) &&
               std::fabs(m2[1] - 2.0 * s) <= 1e-9 * std::max(1.0, r),
           "W m + b gave the wrong tangent vector");
  });

  c.run("transform outputs stay on the sphere", [&] {
    Rng rng(2026);
    std::vector<double> w(9), b(3);
    for (double& v : w) v = rng.uniform(-0.5, 0.5);
    for (double& v : b) v = rng.uniform(-0.5, 0.5);
    for (int trial = 0; trial < 32; ++trial) {
      std::vector<double> z(4);
      for (double& v : z) v = rng.normal();
      auto y = sphere_detail::transform_point(project_point(z, cfg), w, b, cfg);
      double norm = 0.0;
      for (double v : y) norm += v * v;
      norm = std::sqrt(norm);
      expect(std::isfinite(norm) && std::fabs(norm - r) <= 1e-9 * r,
             "output norm drifted from the radius");
    }
  });

  c.run("log length equals the geodesic distance from the pole", [&] {
    Rng rng(2027);
    Tensor pole = Tensor::from_data({4}, {0.0, 0.0, 0.0, r});
    for (int trial = 0; trial < 64; ++trial) {
      std::vector<double> z(4);
      for (double& v : z) v = rng.normal();
      auto x = project_point(z, cfg);
      if (x[3] / r <= -std::cos(eps_pole)) continue;  // skip the cut locus
      auto m = log_map_point(x, cfg);
      double len = 0.0;
      for (double v : m) len += v * v;
      len = std::sqrt(len);
      const double d = geodesic_distance(pole, Tensor::from_data({4}, x), cfg);
      expect(std::fabs(len - d) <= 1e-9 * r,
             "||log(x)|| != d(N, x) at trial " + std::to_string(trial));
    }
  });

  c.run("antipodal inputs are rejected", [&] {
    bool thrown = false;
    try {
      log_map_point({0.0, 0.0, 0.0, -r}, cfg);
    } catch (const DomainError&) {
      thrown = true;
    }
    expect(thrown, "the antipode was accepted");
  });

  c.run("off-sphere inputs are rejected", [&] {
    bool thrown = false;
    try {
      log_map_point({2.0 * r, 0.0, 0.0, 0.0}, cfg);
    } catch (const DomainError&) {
      thrown = true;
    }
    expect(thrown, "an off-sphere point was accepted");
  });

  c.run("tape gradients match central differences", [&] {
    const std::vector<double> z0 = {0.6,  -0.3, 0.8, 0.2,
                                    -0.5, 0.9,  0.1, -0.7};
    const std::vector<double> w0 = {0.3, -0.1, 0.2, 0.4, 0.1, -0.2,
                                    -0.3, 0.2, 0.5};
    const std::vector<double> b0 = {0.05, -0.1, 0.2};
    auto eval = [&](const std::vector<double>& z, const std::vector<double>& w,
                    const std::vector<double>& b, bool with_grad,
                    std::vector<std::vector<double>>* grads) {
      Tensor zt = Tensor::from_data({2, 4}, z, with_grad);
      Tensor wt = Tensor::from_data({3, 3}, w, with_grad);
      Tensor bt = Tensor::from_data({3}, b, with_grad);
      double value = 0.0;
      if (with_grad) {
        Tape tape;
        Tensor y = sphere_transform(project_to_sphere(zt, cfg), wt, bt, cfg);
        Tensor loss = sum_all(y * y * 0.5 + y);
        value = loss.item();
        tape.backward(loss);
        grads->push_back({zt.grad().begin(), zt.grad().end()});
        grads->push_back({wt.grad().begin(), wt.grad().end()});
        grads->push_back({bt.grad().begin(), bt.grad().end()});
      } else {
        Tensor y = sphere_transform(project_to_sphere(zt, cfg), wt, bt, cfg);
        value = sum_all(y * y * 0.5 + y).item();
      }
      return value;
    };
    std::vector<std::vector<double>> grads;
    eval(z0, w0, b0, true, &grads);
    const double h = 1e-6;
    std::vector<std::vector<double>> leaves = {z0, w0, b0};
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      for (std::size_t j = 0; j < leaves[li].size(); ++j) {
        auto hi = leaves, lo = leaves;
        hi[li][j] += h;
        lo[li][j] -= h;
        const double fd = (eval(hi[0], hi[1], hi[2], false, nullptr) -
                           eval(lo[0], lo[1], lo[2], false, nullptr)) /
                          (2.0 * h);
        const double ad = grads[li][j];
        const double rel = std::fabs(ad - fd) /
                           std::max(1.0, std::fabs(ad) + std::fabs(fd));
        expect(rel <= 1e-5, "gradient mismatch in leaf " + std::to_string(li));
      }
    }
  });

  out << (c.failures == 0 ? "selftest passed" : "selftest FAILED") << " ("
      << c.failures << " failing checks)\n";
  return c.failures;
}

}  // namespace deshadow
