#pragma once
// Built-in geometry diagnostics behind the `selftest` CLI command. Each check
// prints one line; the return value is the number of failing checks. Invalid
// parameters (e.g. eps_pole = 0) are not rejected up front: the checks are
// expected to detect the resulting breakage and fail, which gives a handy
// negative control for the singular-branch handling.

#include <iosfwd>

namespace deshadow {

int run_sphere_selftest(double radius, double eps_pole, std::ostream& out);

}  // namespace deshadow
