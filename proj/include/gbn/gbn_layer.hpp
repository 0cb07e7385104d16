#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gbn/deviation.hpp"
#include "gbn/risk_stats.hpp"
#include "gbn/tensor.hpp"

namespace gbn {

enum class Mode { train, infer };

// Inference requested before any training batch updated the running stats.
class UninitializedStatisticsError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Per-channel state of one generalized batch-normalization layer.
///
/// Training normalizes each channel by its batch statistic S and deviation D;
/// inference uses exponential moving averages of the batch values.
struct GbnState {
  GbnState(std::size_t channels, DeviationSpec spec_, double epsilon_ = 1e-5,
           double momentum_ = 0.1)
      : gamma(Tensor::full({channels}, 1.0, true)),
        beta(Tensor::zeros({channels}, true)),
        running_s(channels, 0.0),
        running_d(channels, 1.0),
        epsilon(epsilon_),
        momentum(momentum_),
        spec(spec_) {
    if (channels == 0) throw std::invalid_argument("GbnState: zero channels");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("GbnState: epsilon must be >= 0");
    if (!(momentum > 0.0 && momentum <= 1.0))
      throw std::invalid_argument("GbnState: momentum must lie in (0, 1]");
  }

  std::size_t channels() const { return running_s.size(); }

  // Deep copy; the learnable tensors of a plain copy share storage.
  GbnState clone() const {
    GbnState c = *this;
    c.gamma = gamma.clone();
    c.beta = beta.clone();
    return c;
  }

  Tensor gamma;  // learnable scale [C]
  Tensor beta;   // learnable shift [C]
  std::vector<double> running_s;
  std::vector<double> running_d;
  double epsilon;
  double momentum;
  DeviationSpec spec;
  Mode mode = Mode::train;
  std::size_t batches_seen = 0;
};

/// Values saved by a forward pass for the backward pass.
struct GbnCache {
  Mode mode = Mode::train;
  Shape shape;
  std::vector<double> xhat;  // pre-affine output, same layout as the input
  std::vector<double> denom;  // D + ε per channel
  std::vector<DevEval<double>> stats;  // per channel, indexed by sample order
};

struct GbnGrads {
  std::vector<double> dx;
  std::vector<double> dgamma;
  std::vector<double> dbeta;
};

namespace detail {

struct ChannelLayout {
  std::size_t batch, channels, spatial;

  // Flat input offset of the k-th element of channel c's sample, where the
  // sample enumerates batch index first, then spatial position.
  std::size_t offset(std::size_t c, std::size_t k) const {
    const std::size_t n = k / spatial, s = k % spatial;
    return (n * channels + c) * spatial + s;
  }
  std::size_t sample_size() const { return batch * spatial; }
};

inline ChannelLayout channel_layout(const Shape& shape, std::size_t channels) {
  if ((shape.size() != 2 && shape.size() != 4) || shape[1] != channels) {
    throw ShapeError("gbn: expected [N x " + std::to_string(channels) +
                     "] or [N x " + std::to_string(channels) + " x H x W], got " +
                     to_string(shape));
  }
  if (shape[0] == 0) throw ShapeError("gbn: empty batch");
  const std::size_t spatial = shape.size() == 4 ? shape[2] * shape[3] : 1;
  return {shape[0], channels, spatial};
}

}  // namespace detail

/// Forward values without touching a tape. In train mode the running
/// statistics are updated: running ← (1 − momentum)·running + momentum·batch.
inline GbnCache gbn_forward_values(GbnState& st, std::span<const double> x,
                                   const Shape& shape, std::vector<double>& out) {
  const auto lay = detail::channel_layout(shape, st.channels());
  if (numel(shape) != x.size()) throw ShapeError("gbn: data does not match shape");
  for (double v : x)
    if (std::isnan(v)) throw std::invalid_argument("gbn: NaN in input");

  GbnCache cache;
  cache.mode = st.mode;
  cache.shape = shape;
  cache.xhat.assign(x.size(), 0.0);
  cache.denom.assign(st.channels(), 0.0);
  out.assign(x.size(), 0.0);
  const auto gamma = st.gamma.data();
  const auto beta = st.beta.data();

  if (st.mode == Mode::infer) {
    if (st.batches_seen == 0) {
      throw UninitializedStatisticsError(
          "gbn: inference before any training batch (running statistics unset)");
    }
    for (std::size_t c = 0; c < st.channels(); ++c) {
      const double denom = st.running_d[c] + st.epsilon;
      cache.denom[c] = denom;
      for (std::size_t k = 0; k < lay.sample_size(); ++k) {
        const auto o = lay.offset(c, k);
        cache.xhat[o] = (x[o] - st.running_s[c]) / denom;
        out[o] = gamma[c] * cache.xhat[o] + beta[c];
      }
    }
    return cache;
  }

  if (lay.sample_size() < 2) {
    throw std::invalid_argument("gbn: training needs at least 2 values per channel, got " +
                                std::to_string(lay.sample_size()));
  }
  cache.stats.reserve(st.channels());
  std::vector<double> sample(lay.sample_size());
  for (std::size_t c = 0; c < st.channels(); ++c) {
    for (std::size_t k = 0; k < sample.size(); ++k) sample[k] = x[lay.offset(c, k)];
    auto ev = evaluate(st.spec, std::span<const double>(sample));
    const double denom = ev.d_value + st.epsilon;
    cache.denom[c] = denom;
    for (std::size_t k = 0; k < sample.size(); ++k) {
      const auto o = lay.offset(c, k);
      cache.xhat[o] = (sample[k] - ev.s_value) / denom;
      out[o] = gamma[c] * cache.xhat[o] + beta[c];
    }
    st.running_s[c] = (1.0 - st.momentum) * st.running_s[c] + st.momentum * ev.s_value;
    st.running_d[c] = (1.0 - st.momentum) * st.running_d[c] + st.momentum * ev.d_value;
    cache.stats.push_back(std::move(ev));
  }
  ++st.batches_seen;
  return cache;
}

/// Backward through x̂ = (x − S(x))/(D(x) + ε), y = γ·x̂ + β, per channel:
///   dx_i = [g_i − (Σ g)·∂S/∂x_i − (Σ g·x̂)·∂D/∂x_i] / (D + ε),  g = γ·dy.
inline GbnGrads gbn_backward(const GbnCache& cache, std::span<const double> gamma,
                             std::span<const double> upstream) {
  if (cache.mode != Mode::train) {
    throw std::logic_error("gbn_backward: forward pass was not run in train mode");
  }
  const std::size_t channels = gamma.size();
  const auto lay = detail::channel_layout(cache.shape, channels);
  if (upstream.size() != cache.xhat.size() || cache.stats.size() != channels) {
    throw ShapeError("gbn_backward: gradient or cache size mismatch");
  }
  GbnGrads gr;
  gr.dx.assign(upstream.size(), 0.0);
  gr.dgamma.assign(channels, 0.0);
  gr.dbeta.assign(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto& ev = cache.stats[c];
    double sum_dy = 0.0, sum_dy_x = 0.0;
    for (std::size_t k = 0; k < lay.sample_size(); ++k) {
      const auto o = lay.offset(c, k);
      sum_dy += upstream[o];
      sum_dy_x += upstream[o] * cache.xhat[o];
    }
    gr.dgamma[c] = sum_dy_x;
    gr.dbeta[c] = sum_dy;
    const double sum_g = gamma[c] * sum_dy, sum_gx = gamma[c] * sum_dy_x;
    const double inv = 1.0 / cache.denom[c];
    for (std::size_t k = 0; k < lay.sample_size(); ++k) {
      const auto o = lay.offset(c, k);
      const double g = gamma[c] * upstream[o];
      gr.dx[o] = inv * (g - sum_g * ev.s_grad[k] - sum_gx * ev.d_grad[k]);
    }
  }
  return gr;
}

inline GbnGrads gbn_backward(const GbnState& st, const GbnCache& cache,
                             std::span<const double> upstream) {
  return gbn_backward(cache, st.gamma.data(), upstream);
}

/// Records the layer on the tape. gamma and beta receive gradients; the
/// running statistics never do. Backward through an inference-mode pass
/// is an error.
inline Tensor gbn_forward(Tape& tape, GbnState& st, const Tensor& x) {
  std::vector<double> out;
  auto cache = std::make_shared<GbnCache>(gbn_forward_values(st, x.data(), x.shape(), out));
  // The rule reads gamma at backward time; parameters do not change between
  // forward and backward within one tape.
  return tape.record(
      "gbn", {x, st.gamma, st.beta}, x.shape(), std::move(out),
      [cache, gamma = st.gamma](std::span<const double> g,
                                std::span<const std::span<double>> in) {
        const auto gr = gbn_backward(*cache, gamma.data(), g);
        if (!in[0].empty())
          for (std::size_t i = 0; i < gr.dx.size(); ++i) in[0][i] += gr.dx[i];
        if (!in[1].empty())
          for (std::size_t i = 0; i < gr.dgamma.size(); ++i) in[1][i] += gr.dgamma[i];
        if (!in[2].empty())
          for (std::size_t i = 0; i < gr.dbeta.size(); ++i) in[2][i] += gr.dbeta[i];
      });
}

/// Fraction of exact zeros per channel after a train-mode pass followed by
/// ReLU. With a quantile statistic at level α and distinct values this is
/// ⌈α·Nₛ⌉/Nₛ. The state is not modified.
inline std::vector<double> sparsity_fraction(const GbnState& st, const Tensor& x) {
  if (!st.spec.has_quantile_statistic()) {
    throw std::invalid_argument("sparsity_fraction: spec '" + st.spec.name() +
                                "' has no quantile statistic");
  }
  for (std::size_t c = 0; c < st.channels(); ++c) {
    if (st.beta[c] != 0.0 || !(st.gamma[c] > 0.0)) {
      throw std::invalid_argument("sparsity_fraction: needs beta = 0 and gamma > 0");
    }
  }
  GbnState probe = st.clone();
  probe.mode = Mode::train;
  std::vector<double> out;
  gbn_forward_values(probe, x.data(), x.shape(), out);
  const auto lay = detail::channel_layout(x.shape(), st.channels());
  std::vector<double> frac(st.channels(), 0.0);
  for (std::size_t c = 0; c < st.channels(); ++c) {
    std::size_t zeros = 0;
    for (std::size_t k = 0; k < lay.sample_size(); ++k)
      if (!(out[lay.offset(c, k)] > 0.0)) ++zeros;  // relu(v) == 0
    frac[c] = static_cast<double>(zeros) / static_cast<double>(lay.sample_size());
  }
  return frac;
}

struct BpoeEquivalence {
  double alpha;  // #{x ≤ mean}/N
  double lhs;    // (1/N)·Σ relu((x − q_α)/(q̄_α − q_α))
  double rhs;    // bpoe_tail_form(x, α)
  double gap;
};

/// Compares GBN-with-ReLU output mass against bPOE when α is the level at
/// which the mean sits.
inline BpoeEquivalence bpoe_equivalence_check(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("bpoe_equivalence_check: empty sample");
  const std::size_t n = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(n);
  std::size_t below = 0;
  for (double v : x)
    if (v <= mu) ++below;
  const double alpha = static_cast<double>(below) / static_cast<double>(n);
  if (below == n) {
    throw risk::DegenerateTailError("bpoe_equivalence_check: no sample above the mean");
  }
  const double rhs = risk::bpoe_tail_form(x, alpha);  // throws on a degenerate tail
  const double q = risk::quantile(x, alpha);
  const double qbar = risk::superquantile(x, alpha);
  double lhs = 0.0;
  for (double v : x) lhs += std::max((v - q) / (qbar - q), 0.0);
  lhs /= static_cast<double>(n);
  return {alpha, lhs, rhs, std::abs(lhs - rhs)};
}

}  // namespace gbn
