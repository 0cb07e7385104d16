#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gbn/risk_stats.hpp"

namespace gbn {

enum class DeviationKind { sd, mad, rsd, sqd, rbd, wcd };

/// A deviation measure D and its paired statistic S.
///
/// | kind | D(x)                 | S(x)              |
/// |------|----------------------|-------------------|
/// | sd   | sqrt(E[(x − Ex)²])   | E[x]              |
/// | mad  | E|x − Ex|            | E[x]              |
/// | rsd  | E[x − Ex]⁺           | E[x]              |
/// | sqd  | q̄_α(x − Ex)          | q_α(x)            |
/// | rbd  | sup x − inf x        | (sup x + inf x)/2 |
/// | wcd  | sup x − E[x]         | sup x             |
///
/// The same α is used for the SQD deviation and its quantile statistic.
class DeviationSpec {
 public:
  explicit DeviationSpec(DeviationKind kind) : kind_(kind) {
    if (kind == DeviationKind::sqd) {
      throw std::invalid_argument("DeviationSpec: sqd needs a probability level");
    }
  }

  static DeviationSpec sd() { return DeviationSpec(DeviationKind::sd); }
  static DeviationSpec mad() { return DeviationSpec(DeviationKind::mad); }
  static DeviationSpec rsd() { return DeviationSpec(DeviationKind::rsd); }
  static DeviationSpec rbd() { return DeviationSpec(DeviationKind::rbd); }
  static DeviationSpec wcd() { return DeviationSpec(DeviationKind::wcd); }
  static DeviationSpec sqd(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw std::invalid_argument("DeviationSpec: sqd alpha must lie in (0, 1), got " +
                              std::to_string(alpha));
    }
    DeviationSpec s;
    s.kind_ = DeviationKind::sqd;
    s.alpha_ = alpha;
    return s;
  }

  DeviationKind kind() const { return kind_; }
  std::optional<double> alpha() const { return alpha_; }
  bool has_quantile_statistic() const { return kind_ == DeviationKind::sqd; }

  /// Lowercase name: sd, mad, rsd, sqd1 (α=.25), sqd2 (.5), sqd3 (.75),
  /// rbd, wcd. Other SQD levels print as "sqd@<alpha>".
  std::string name() const {
    switch (kind_) {
      case DeviationKind::sd: return "sd";
      case DeviationKind::mad: return "mad";
      case DeviationKind::rsd: return "rsd";
      case DeviationKind::rbd: return "rbd";
      case DeviationKind::wcd: return "wcd";
      case DeviationKind::sqd: break;
    }
    if (*alpha_ == 0.25) return "sqd1";
    if (*alpha_ == 0.5) return "sqd2";
    if (*alpha_ == 0.75) return "sqd3";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, *alpha_);
    return "sqd@" + std::string(buf, res.ptr);
  }

  static DeviationSpec parse(std::string_view name) {
    if (name == "sd") return sd();
    if (name == "mad") return mad();
    if (name == "rsd") return rsd();
    if (name == "rbd") return rbd();
    if (name == "wcd") return wcd();
    if (name == "sqd1") return sqd(0.25);
    if (name == "sqd2") return sqd(0.5);
    if (name == "sqd3") return sqd(0.75);
    if (name.starts_with("sqd@")) {
      const std::string tail(name.substr(4));
      std::size_t used = 0;
      double a = 0.0;
      try {
        a = std::stod(tail, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == tail.size() && used > 0) return sqd(a);
    }
    throw std::invalid_argument("unknown deviation spec '" + std::string(name) +
                                "' (expected sd|mad|rsd|sqd1|sqd2|sqd3|rbd|wcd)");
  }

  friend bool operator==(const DeviationSpec&, const DeviationSpec&) = default;

 private:
  DeviationSpec() = default;
  DeviationKind kind_ = DeviationKind::sd;
  std::optional<double> alpha_;
};

/// Values and subgradients of D and S with respect to each sample value.
template <std::floating_point T>
struct DevEval {
  T d_value{};
  T s_value{};
  std::vector<T> d_grad;
  std::vector<T> s_grad;
};

namespace detail {

template <std::floating_point T>
std::size_t argmax_lowest(std::span<const T> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

template <std::floating_point T>
std::size_t argmin_lowest(std::span<const T> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] < x[best]) best = i;
  return best;
}

}  // namespace detail

/// Evaluates D and S on one batch sample with population (1/N) conventions.
/// Constant samples give D = 0 for every kind; the caller guards the division.
template <std::floating_point T>
DevEval<T> evaluate(const DeviationSpec& spec, std::span<const T> x) {
  if (x.empty()) throw std::invalid_argument("deviation: empty sample");
  for (T v : x)
    if (!std::isfinite(v)) throw std::invalid_argument("deviation: non-finite sample value");

  const std::size_t n = x.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  double mu = 0.0;
  for (T v : x) mu += v;
  mu *= inv_n;

  DevEval<T> r;
  r.d_grad.assign(n, T{0});
  r.s_grad.assign(n, T{0});
  auto mean_statistic = [&] {
    r.s_value = static_cast<T>(mu);
    std::fill(r.s_grad.begin(), r.s_grad.end(), static_cast<T>(inv_n));
  };

  switch (spec.kind()) {
    case DeviationKind::sd: {
      mean_statistic();
      double ss = 0.0;
      for (T v : x) ss += (v - mu) * (v - mu);
      const double sd = std::sqrt(ss * inv_n);
      r.d_value = static_cast<T>(sd);
      if (sd > 0.0)
        for (std::size_t i = 0; i < n; ++i)
          r.d_grad[i] = static_cast<T>((x[i] - mu) * inv_n / sd);
      break;
    }
    case DeviationKind::mad: {
      mean_statistic();
      double abs_sum = 0.0, sign_mean = 0.0;
      std::vector<double> sign(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double c = x[i] - mu;
        abs_sum += std::abs(c);
        sign[i] = c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
        sign_mean += sign[i];
      }
      sign_mean *= inv_n;
      r.d_value = static_cast<T>(abs_sum * inv_n);
      for (std::size_t i = 0; i < n; ++i)
        r.d_grad[i] = static_cast<T>((sign[i] - sign_mean) * inv_n);
      break;
    }
    case DeviationKind::rsd: {
      mean_statistic();
      double pos_sum = 0.0;
      std::size_t above = 0;
      for (T v : x)
        if (v > mu) {
          pos_sum += v - mu;
          ++above;
        }
      r.d_value = static_cast<T>(pos_sum * inv_n);
      const double frac = static_cast<double>(above) * inv_n;
      for (std::size_t i = 0; i < n; ++i)
        r.d_grad[i] = static_cast<T>(((x[i] > mu ? 1.0 : 0.0) - frac) * inv_n);
      break;
    }
    case DeviationKind::sqd: {
      const double alpha = *spec.alpha();
      std::vector<T> centered(n);
      for (std::size_t i = 0; i < n; ++i) centered[i] = static_cast<T>(x[i] - mu);
      const std::span<const T> cs(centered);
      const auto w = risk::superquantile_tail_weights(cs, alpha);
      // q̄_α(x − μ) as the weighted tail sum, which is exactly what the
      // weights differentiate.
      double d = 0.0;
      for (std::size_t i = 0; i < n; ++i) d += static_cast<double>(w[i]) * centered[i];
      r.d_value = static_cast<T>(std::max(d, 0.0));
      for (std::size_t i = 0; i < n; ++i) r.d_grad[i] = static_cast<T>(w[i] - inv_n);
      const auto qi = risk::quantile_index(x, alpha);
      r.s_value = x[qi];
      r.s_grad[qi] = T{1};
      break;
    }
    case DeviationKind::rbd: {
      const auto hi = detail::argmax_lowest(x);
      const auto lo = detail::argmin_lowest(x);
      r.d_value = x[hi] - x[lo];
      r.s_value = static_cast<T>(0.5 * (static_cast<double>(x[hi]) + x[lo]));
      if (hi != lo) {
        r.d_grad[hi] = T{1};
        r.d_grad[lo] = T{-1};
      }
      r.s_grad[hi] += T{0.5};
      r.s_grad[lo] += T{0.5};
      break;
    }
    case DeviationKind::wcd: {
      const auto hi = detail::argmax_lowest(x);
      r.s_value = x[hi];
      r.d_value = static_cast<T>(std::max(static_cast<double>(x[hi]) - mu, 0.0));
      for (std::size_t i = 0; i < n; ++i) r.d_grad[i] = static_cast<T>(-inv_n);
      r.d_grad[hi] += T{1};
      r.s_grad[hi] = T{1};
      break;
    }
  }
  return r;
}

template <std::floating_point T>
DevEval<T> evaluate(const DeviationSpec& spec, const std::vector<T>& x) {
  return evaluate(spec, std::span<const T>(x));
}

}  // namespace gbn
