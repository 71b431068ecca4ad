#pragma once
// Hypersphere feature geometry. Rows of a tensor's last dimension are points
// X on the radius-r sphere in R^n (pole N = (0,...,0,r)) or tangent vectors
// m in R^{n-1} at the pole (the n-th tangent coordinate is identically 0 and
// is not stored). All maps are differentiable through the tape; the functions
// with a singularity at the pole switch to truncated series below eps_pole.

#include <vector>

#include "deshadow/tensor.hpp"

namespace deshadow {

struct SphereConfig {
  double radius = 1.0;
  double eps_pole = 1e-6;

  void validate() const;  // radius and eps_pole must be positive and sane
};

// row-normalize onto the sphere; zero rows are rejected
Tensor project_to_sphere(const Tensor& x, const SphereConfig& cfg);

// sphere point [..., n] -> tangent vector [..., n-1]; rejects rows that are
// off the sphere (relative norm error > 1e-6) or within eps_pole of the
// antipode, where the map is undefined
Tensor log_map(const Tensor& x, const SphereConfig& cfg);

// tangent vector [..., k] -> sphere point [..., k+1]; defined everywhere;
// inverts log_map when ||m|| < pi * r
Tensor exp_map(const Tensor& m, const SphereConfig& cfg);

// affine map in the tangent plane: rows m -> W m + b
// m: [..., k] with rank >= 2, w: [k, k], b: [k]
Tensor tangent_linear(const Tensor& m, const Tensor& w, const Tensor& b);

// exp_map(tangent_linear(log_map(x)))
Tensor sphere_transform(const Tensor& x, const Tensor& w, const Tensor& b,
                        const SphereConfig& cfg);

// arc length r*acos(<x,y>/r^2) between two single points [n]; rejects
// off-sphere inputs like log_map does
double geodesic_distance(const Tensor& x, const Tensor& y,
                         const SphereConfig& cfg);

namespace sphere_detail {

// both branches of each singular multiplier, exposed so the diagnostics can
// verify they agree across the switch point
double u_exact(double t);       // acos(t) / sin(acos(t))
double u_series(double t);      // 1 + acos(t)^2 / 6
double sinc_exact(double beta);   // sin(beta) / beta
double sinc_series(double beta);  // 1 - beta^2 / 6

// scalar single-point reference path (also drives the CLI transform command)
std::vector<double> log_map_point(const std::vector<double>& x,
                                  const SphereConfig& cfg);
std::vector<double> exp_map_point(const std::vector<double>& m,
                                  const SphereConfig& cfg);
std::vector<double> project_point(const std::vector<double>& x,
                                  const SphereConfig& cfg);
// w is row-major [k, k]
std::vector<double> transform_point(const std::vector<double>& x,
                                    const std::vector<double>& w,
                                    const std::vector<double>& b,
                                    const SphereConfig& cfg);

}  // namespace sphere_detail
}  // namespace deshadow
