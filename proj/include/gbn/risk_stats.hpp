#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Empirical quantile, superquantile (CVaR) and buffered probability of
// exceedance on equally weighted finite samples.
namespace gbn::risk {

// The tail of the sample above the quantile is empty or constant.
class DegenerateTailError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

template <std::floating_point T>
void require_sample(std::span<const T> x, const char* op) {
  if (x.empty()) throw std::invalid_argument(std::string(op) + ": empty sample");
  for (T v : x)
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string(op) + ": non-finite sample value");
}

inline void require_probability(double alpha, bool allow_one, const char* op) {
  if (!(alpha >= 0.0) || alpha > 1.0 || (!allow_one && alpha >= 1.0)) {
    throw std::domain_error(std::string(op) + ": probability level " + std::to_string(alpha) +
                            (allow_one ? " outside [0, 1]" : " outside [0, 1)"));
  }
}

}  // namespace detail

/// ⌈α·N⌉ with a relative guard so that α = k/N computed in floating point
/// still yields k; α > 0 always gives at least 1.
inline std::size_t tail_position(double alpha, std::size_t n) {
  if (alpha <= 0.0) return 0;
  const double scaled = alpha * static_cast<double>(n);
  auto m = static_cast<std::size_t>(std::ceil(scaled - 1e-9 * std::max(1.0, scaled)));
  return std::clamp<std::size_t>(m, 1, n);
}

/// Indices that sort `x` ascending; equal values keep their original order.
template <std::floating_point T>
std::vector<std::size_t> sorted_order(std::span<const T> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  return order;
}

/// Original index of the order statistic selected by the lower quantile;
/// among equal values the lowest original index.
template <std::floating_point T>
std::size_t quantile_index(std::span<const T> x, double alpha) {
  detail::require_sample(x, "quantile");
  detail::require_probability(alpha, true, "quantile");
  const auto order = sorted_order(x);
  auto k = tail_position(alpha, x.size());
  k = k == 0 ? 0 : k - 1;
  while (k > 0 && x[order[k - 1]] == x[order[k]]) --k;
  return order[k];
}

/// Lower empirical quantile min{z : P(x ≤ z) ≥ α}.
template <std::floating_point T>
T quantile(std::span<const T> x, double alpha) {
  return x[quantile_index(x, alpha)];
}

/// Superquantile min_γ γ + E[x − γ]⁺/(1 − α), evaluated at γ = q_α.
template <std::floating_point T>
T superquantile(std::span<const T> x, double alpha) {
  detail::require_sample(x, "superquantile");
  detail::require_probability(alpha, false, "superquantile");
  const std::size_t n = x.size();
  const auto order = sorted_order(x);
  const auto m = tail_position(alpha, n);
  if (m == 0) {
    double s = 0.0;
    for (T v : x) s += v;
    return static_cast<T>(s / static_cast<double>(n));
  }
  const double gamma = x[order[m - 1]];
  double excess = 0.0;
  for (std::size_t k = m; k < n; ++k) excess += static_cast<double>(x[order[k]]) - gamma;
  // The exact value lies in [q_α, max]; rounding in 1 − α can overshoot max.
  const double top = x[order[n - 1]];
  return static_cast<T>(
      std::clamp(gamma + excess / (static_cast<double>(n) * (1.0 - alpha)), gamma, top));
}

/// Subgradient of the superquantile with respect to each sample value.
///
/// Order statistics strictly above position m = ⌈αN⌉ get 1/(N(1−α)); the
/// order-m sample gets the remaining mass so the weights sum to one.
template <std::floating_point T>
std::vector<T> superquantile_tail_weights(std::span<const T> x, double alpha) {
  detail::require_sample(x, "superquantile_tail_weights");
  detail::require_probability(alpha, false, "superquantile_tail_weights");
  const std::size_t n = x.size();
  std::vector<T> w(n, T{0});
  const auto m = tail_position(alpha, n);
  if (m == 0) {
    std::fill(w.begin(), w.end(), static_cast<T>(1.0 / static_cast<double>(n)));
    return w;
  }
  const auto order = sorted_order(x);
  const double tail = 1.0 / (static_cast<double>(n) * (1.0 - alpha));
  for (std::size_t k = m; k < n; ++k) w[order[k]] = static_cast<T>(tail);
  w[order[m - 1]] = static_cast<T>(1.0 - static_cast<double>(n - m) * tail);
  return w;
}

/// Buffered probability of exceedance min_{γ<z} E[x − γ]⁺/(z − γ).
///
/// The objective is a ratio of affine functions between sample points, so the
/// minimum is attained at a sample value below z, as γ → −∞ (value 1), or as
/// γ → z⁻ (value P(x = z) when no sample exceeds z).
template <std::floating_point T>
double bpoe(std::span<const T> x, double z) {
  detail::require_sample(x, "bpoe");
  const std::size_t n = x.size();
  std::vector<double> s(x.begin(), x.end());
  std::sort(s.begin(), s.end());
  if (z > s.back()) return 0.0;

  // suffix[k] = Σ_{i≥k} s[i]
  std::vector<double> suffix(n + 1, 0.0);
  for (std::size_t k = n; k-- > 0;) suffix[k] = suffix[k + 1] + s[k];

  double best = 1.0;
  for (std::size_t k = 0; k < n && s[k] < z; ++k) {
    if (k > 0 && s[k] == s[k - 1]) continue;
    const double gamma = s[k];
    // Elements ≤ γ contribute nothing; the first index above γ:
    const auto above = static_cast<std::size_t>(
        std::upper_bound(s.begin(), s.end(), gamma) - s.begin());
    const double excess = (suffix[above] - static_cast<double>(n - above) * gamma) /
                          static_cast<double>(n);
    best = std::min(best, excess / (z - gamma));
  }
  if (z == s.back()) {
    const auto at = static_cast<std::size_t>(
        std::lower_bound(s.begin(), s.end(), z) - s.begin());
    best = std::min(best, static_cast<double>(n - at) / static_cast<double>(n));
  }
  return std::clamp(best, 0.0, 1.0);
}

/// E[x − q_α]⁺ / (q̄_α − q_α); equals bpoe at z = q̄_α whenever that bPOE is 1 − α.
template <std::floating_point T>
double bpoe_tail_form(std::span<const T> x, double alpha) {
  const double q = quantile(x, alpha);
  const double qbar = superquantile(x, alpha);
  const double scale = std::max(std::abs(q), std::abs(qbar));
  if (!(qbar - q > 8.0 * std::numeric_limits<double>::epsilon() * scale)) {
    throw DegenerateTailError("bpoe_tail_form: superquantile equals quantile at alpha " +
                              std::to_string(alpha) + " (constant tail)");
  }
  double excess = 0.0;
  for (T v : x) excess += std::max(static_cast<double>(v) - q, 0.0);
  excess /= static_cast<double>(x.size());
  return excess / (qbar - q);
}

}  // namespace gbn::risk
