#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the code under test except for plain types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "gbn/rng.hpp"

namespace oracle {

// |a − n| / max(|a| + |n|, floor). The floor keeps exact zeros from
// producing 0/0 and treats tiny absolute errors on tiny values as a pass.
inline double rel_err(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& n,
                          double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], n[i], floor));
  return worst;
}

// Central differences of a scalar function of a vector.
inline std::vector<double> central_diff(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

// Distinct values, spread enough that ±1e-4 never reorders them, with the
// mean kept away from every sample point.
inline std::vector<double> distinct_sample(gbn::Rng& rng, std::size_t n, double spread = 4.0) {
  for (;;) {
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(-spread, spread);
    std::vector<double> s = x;
    std::sort(s.begin(), s.end());
    bool ok = true;
    for (std::size_t i = 1; i < n && ok; ++i) ok = s[i] - s[i - 1] > 1e-3;
    const double mu = mean(x);
    for (double v : x) ok = ok && std::abs(v - mu) > 1e-3;
    if (ok) return x;
  }
}

// Brute-force superquantile: min over a uniform γ grid of γ + E[x − γ]⁺/(1 − α),
// refined once around the best grid point.
inline double superquantile_grid(const std::vector<double>& x, double alpha,
                                 std::size_t points = 10000) {
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  auto objective = [&](double g) {
    double e = 0.0;
    for (double v : x) e += std::max(v - g, 0.0);
    return g + e / (static_cast<double>(x.size()) * (1.0 - alpha));
  };
  double lo = *mn - 1.0, hi = *mx + 1.0;
  double best = std::numeric_limits<double>::infinity();
  for (int pass = 0; pass < 3; ++pass) {
    const double step = (hi - lo) / static_cast<double>(points - 1);
    double arg = lo;
    for (std::size_t k = 0; k < points; ++k) {
      const double g = lo + step * static_cast<double>(k);
      const double v = objective(g);
      if (v < best) best = v, arg = g;
    }
    lo = arg - step;
    hi = arg + step;
  }
  return best;
}

// Brute-force bPOE over γ < z: grid on (min − 10, z), refined around the
// minimizer, plus the γ → −∞ value 1 and the γ → z⁻ limit.
inline double bpoe_grid(const std::vector<double>& x, double z, std::size_t points = 10000) {
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  if (z > *mx) return 0.0;
  const double n = static_cast<double>(x.size());
  auto objective = [&](double g) {
    double e = 0.0;
    for (double v : x) e += std::max(v - g, 0.0);
    return e / (n * (z - g));
  };
  double best = 1.0;
  double lo = std::min(*mn, z) - 10.0, hi = z;
  for (int pass = 0; pass < 3; ++pass) {
    const double step = (hi - lo) / static_cast<double>(points);
    double arg = lo;
    for (std::size_t k = 0; k < points; ++k) {
      const double g = lo + step * static_cast<double>(k);
      if (!(g < z)) break;
      const double v = objective(g);
      if (v < best) best = v, arg = g;
    }
    lo = arg - step;
    hi = std::min(arg + step, z);
  }
  std::size_t at_z = 0;
  for (double v : x) at_z += v >= z;
  if (z == *mx) best = std::min(best, static_cast<double>(at_z) / n);
  return std::clamp(best, 0.0, 1.0);
}

// bPOE in its a-parameterized form: min_{a ≥ 0} E[a(x − z) + 1]⁺. The
// objective is convex piecewise linear in a with kinks at a = 1/(z − x_i).
inline double bpoe_a_form(const std::vector<double>& x, double z) {
  const double n = static_cast<double>(x.size());
  auto objective = [&](double a) {
    double e = 0.0;
    for (double v : x) e += std::max(a * (v - z) + 1.0, 0.0);
    return e / n;
  };
  double best = objective(0.0);
  for (double v : x)
    if (v < z) best = std::min(best, objective(1.0 / (z - v)));
  // a → ∞ limit: only samples at or above z contribute, those above diverge.
  bool any_above = false;
  std::size_t at_z = 0;
  for (double v : x) {
    any_above = any_above || v > z;
    at_z += v == z;
  }
  if (!any_above) best = std::min(best, static_cast<double>(at_z) / n);
  return best;
}

// Textbook batch normalization on one channel, written directly from the
// usual derivation with population variance and ε inside the square root.
struct BnReference {
  std::vector<double> y;
  std::vector<double> dx;
  double dgamma = 0.0;
  double dbeta = 0.0;
};

inline BnReference batchnorm_reference(const std::vector<double>& x, double gamma, double beta,
                                       double eps, const std::vector<double>& dy) {
  const std::size_t n = x.size();
  const double m = static_cast<double>(n);
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= m;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= m;
  const double inv_std = 1.0 / std::sqrt(var + eps);
  BnReference r;
  std::vector<double> xhat(n);
  r.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (x[i] - mu) * inv_std;
    r.y[i] = gamma * xhat[i] + beta;
  }
  double sum_dy = 0.0, sum_dy_xhat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum_dy += dy[i];
    sum_dy_xhat += dy[i] * xhat[i];
  }
  r.dgamma = sum_dy_xhat;
  r.dbeta = sum_dy;
  r.dx.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.dx[i] = gamma * inv_std / m * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
  }
  return r;
}

}  // namespace oracle
