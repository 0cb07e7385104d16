#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gbn/tensor.hpp"

// Differentiable primitives. Every op takes the tape first; on a
// non-recording tape (or with untracked inputs) nothing is recorded.
namespace gbn::ops {

namespace detail {

// c[M×N] += a[M×K] · b[K×N], all row-major.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M×N] += aᵀ · b where a is [K×M], b is [K×N].
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M×N] += a · bᵀ where a is [M×K], b is [N×K].
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return tape.record(
      "matmul", {a, b}, {m, n}, std::move(out),
      [a, b, m, k, n](std::span<const double> g, std::span<const std::span<double>> in) {
        if (!in[0].empty()) {  // dA = dC · Bᵀ
          detail::gemm_nt_acc(g.data(), b.data().data(), in[0].data(), m, n, k);
        }
        if (!in[1].empty()) {  // dB = Aᵀ · dC
          detail::gemm_tn_acc(a.data().data(), g.data(), in[1].data(), k, m, n);
        }
      });
}

/// Adds a per-channel bias: x is [N×C] or [N×C×H×W], bias is [C].
inline Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_bias: incompatible shapes " + to_string(x.shape()) + " and " +
                     to_string(bias.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.size() / std::max<std::size_t>(n * c, 1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.data() + (i * c + ch) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) p[s] += bias[ch];
    }
  return tape.record(
      "add_bias", {x, bias}, x.shape(), std::move(out),
      [n, c, spatial](std::span<const double> g, std::span<const std::span<double>> in) {
        if (!in[0].empty())
          for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
        if (!in[1].empty())
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double* p = g.data() + (i * c + ch) * spatial;
              double s = 0.0;
              for (std::size_t k = 0; k < spatial; ++k) s += p[k];
              in[1][ch] += s;
            }
      });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return tape.record("add", {a, b}, a.shape(), std::move(out),
                     [](std::span<const double> g, std::span<const std::span<double>> in) {
                       for (auto& dst : in)
                         if (!dst.empty())
                           for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                     });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return tape.record("mul", {a, b}, a.shape(), std::move(out),
                     [a, b](std::span<const double> g, std::span<const std::span<double>> in) {
                       if (!in[0].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i] * b[i];
                       if (!in[1].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) in[1][i] += g[i] * a[i];
                     });
}

inline Tensor square(Tape& tape, const Tensor& x) { return mul(tape, x, x); }

inline Tensor scale(Tape& tape, const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  return tape.record("scale", {x}, x.shape(), std::move(out),
                     [factor](std::span<const double> g, std::span<const std::span<double>> in) {
                       if (!in[0].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += factor * g[i];
                     });
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " +
                     to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return tape.record("reshape", {x}, std::move(shape), std::move(out),
                     [](std::span<const double> g, std::span<const std::span<double>> in) {
                       if (!in[0].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) in[0][i] += g[i];
                     });
}

/// [N×...] → [N×rest].
inline Tensor flatten(Tape& tape, const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("flatten: scalar input");
  const std::size_t n = x.dim(0);
  return reshape(tape, x, {n, n == 0 ? 0 : x.size() / n});
}

/// Elementwise max(x, 0). The subgradient at exactly 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return tape.record("relu", {x}, x.shape(), std::move(out),
                     [x](std::span<const double> g, std::span<const std::span<double>> in) {
                       if (in[0].empty()) return;
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (x[i] > 0.0) in[0][i] += g[i];
                     });
}

enum class ReduceKind { sum, mean, max, min };

/// Reduces over `axes` (all axes when empty); reduced axes are dropped.
/// max/min route the gradient to the lowest flat index among tied extremes.
inline Tensor reduce(Tape& tape, const Tensor& x, ReduceKind kind,
                     std::vector<std::size_t> axes = {}) {
  const auto rank = x.rank();
  std::vector<bool> reduced(rank, axes.empty());
  for (auto ax : axes) {
    if (ax >= rank) {
      throw std::out_of_range("reduce: axis " + std::to_string(ax) +
                              " is invalid for shape " + to_string(x.shape()));
    }
    if (reduced[ax]) throw std::invalid_argument("reduce: repeated axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t group = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    if (reduced[d]) group *= x.dim(d);
    else out_shape.push_back(x.dim(d));
  }
  const std::size_t out_n = numel(out_shape);
  const bool extremal = kind == ReduceKind::max || kind == ReduceKind::min;
  if (group == 0 && kind != ReduceKind::sum) {
    throw std::invalid_argument("reduce: mean/max/min over an empty extent");
  }

  // Flat input index → flat output index.
  std::vector<std::size_t> target(x.size());
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < x.size(); ++flat) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < rank; ++d)
        if (!reduced[d]) o = o * x.dim(d) + idx[d];
      target[flat] = o;
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < x.dim(d)) break;
        idx[d] = 0;
      }
    }
  }

  std::vector<double> out(out_n, 0.0);
  std::vector<std::size_t> arg(extremal ? out_n : 0, std::numeric_limits<std::size_t>::max());
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    const auto o = target[flat];
    const double v = x[flat];
    if (!extremal) {
      out[o] += v;
    } else if (arg[o] == std::numeric_limits<std::size_t>::max() ||
               (kind == ReduceKind::max ? v > out[o] : v < out[o])) {
      out[o] = v;
      arg[o] = flat;
    }
  }
  if (kind == ReduceKind::mean)
    for (auto& v : out) v /= static_cast<double>(group);

  return tape.record(
      "reduce", {x}, std::move(out_shape), std::move(out),
      [kind, group, target = std::move(target), arg = std::move(arg)](
          std::span<const double> g, std::span<const std::span<double>> in) {
        if (in[0].empty()) return;
        switch (kind) {
          case ReduceKind::sum:
            for (std::size_t i = 0; i < target.size(); ++i) in[0][i] += g[target[i]];
            break;
          case ReduceKind::mean:
            for (std::size_t i = 0; i < target.size(); ++i)
              in[0][i] += g[target[i]] / static_cast<double>(group);
            break;
          case ReduceKind::max:
          case ReduceKind::min:
            for (std::size_t o = 0; o < arg.size(); ++o) in[0][arg[o]] += g[o];
            break;
        }
      });
}

inline Tensor sum(Tape& tape, const Tensor& x) { return reduce(tape, x, ReduceKind::sum); }
inline Tensor mean(Tape& tape, const Tensor& x) { return reduce(tape, x, ReduceKind::mean); }

/// Mean over the batch of −log softmax(logits)[label]; logits are [N×K].
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                    std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("softmax_cross_entropy: logits " + to_string(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> probs(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(k) + ")");
    }
    const double* row = logits.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - mx - log_z);
    loss += -(row[label] - mx - log_z);
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(
      "softmax_cross_entropy", {logits}, {}, {loss},
      [probs = std::move(probs), lab = std::move(lab), n, k](
          std::span<const double> g, std::span<const std::span<double>> in) {
        if (in[0].empty()) return;
        const double scale = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
            in[0][i * k + j] += scale * (probs[i * k + j] - onehot);
          }
      });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

// cols[(ch*kh + i)*kw + j][oy*ow + ox] for one image.
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((ch * g.kh + i) * g.kw + j) * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(g.h) &&
                                x < static_cast<std::ptrdiff_t>(g.w);
            row[oy * g.ow + ox] = inside ? img[(ch * g.h + y) * g.w + x] : 0.0;
          }
        }
      }
}

inline void col2im_acc(const double* cols, const ConvGeometry& g, double* img) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((ch * g.kh + i) * g.kw + j) * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(ch * g.h + y) * g.w + x] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation with zero padding. input [N×C×H×W], kernel [F×C×kh×kw].
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel,
                     Conv2dOptions opt = {}) {
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: incompatible shapes " + to_string(input.shape()) + " and " +
                     to_string(kernel.shape()));
  }
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  detail::ConvGeometry g{};
  g.n = input.dim(0), g.c = input.dim(1), g.h = input.dim(2), g.w = input.dim(3);
  g.f = kernel.dim(0), g.kh = kernel.dim(2), g.kw = kernel.dim(3);
  g.stride = opt.stride, g.pad = opt.padding;
  const std::size_t ph = g.h + 2 * g.pad, pw = g.w + 2 * g.pad;
  if (g.kh > ph || g.kw > pw || g.kh == 0 || g.kw == 0) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) +
                     " produces no output for input " + to_string(input.shape()) +
                     " with padding " + std::to_string(g.pad));
  }
  g.oh = (ph - g.kh) / g.stride + 1;
  g.ow = (pw - g.kw) / g.stride + 1;

  std::vector<double> out(g.n * g.f * g.positions(), 0.0);
  std::vector<double> cols(g.patch() * g.positions());
  for (std::size_t b = 0; b < g.n; ++b) {
    detail::im2col(input.data().data() + b * g.c * g.h * g.w, g, cols.data());
    detail::gemm_acc(kernel.data().data(), cols.data(), out.data() + b * g.f * g.positions(),
                     g.f, g.patch(), g.positions());
  }
  return tape.record(
      "conv2d", {input, kernel}, {g.n, g.f, g.oh, g.ow}, std::move(out),
      [input, kernel, g](std::span<const double> grad, std::span<const std::span<double>> in) {
        std::vector<double> cols(g.patch() * g.positions());
        for (std::size_t b = 0; b < g.n; ++b) {
          const double* gb = grad.data() + b * g.f * g.positions();
          if (!in[1].empty()) {  // dK += dOut · colsᵀ
            detail::im2col(input.data().data() + b * g.c * g.h * g.w, g, cols.data());
            detail::gemm_nt_acc(gb, cols.data(), in[1].data(), g.f, g.positions(), g.patch());
          }
          if (!in[0].empty()) {  // dcols = Kᵀ · dOut
            std::fill(cols.begin(), cols.end(), 0.0);
            detail::gemm_tn_acc(kernel.data().data(), gb, cols.data(), g.patch(), g.f,
                                g.positions());
            detail::col2im_acc(cols.data(), g, in[0].data() + b * g.c * g.h * g.w);
          }
        }
      });
}

/// Max pooling over size×size windows (no padding, floor output extent).
inline Tensor maxpool2d(Tape& tape, const Tensor& x, std::size_t size = 2,
                        std::size_t stride = 2) {
  if (x.rank() != 4 || size == 0 || stride == 0 || x.dim(2) < size || x.dim(3) < size) {
    throw ShapeError("maxpool2d: window " + std::to_string(size) + " does not fit " +
                     to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = (h - size) / stride + 1, ow = (w - size) / stride + 1;
  std::vector<double> out(n * c * oh * ow);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < size; ++i)
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t idx = plane * h * w + (oy * stride + i) * w + ox * stride + j;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = x[best];
        arg[o] = best;
      }
  return tape.record("maxpool2d", {x}, {n, c, oh, ow}, std::move(out),
                     [arg = std::move(arg)](std::span<const double> g,
                                            std::span<const std::span<double>> in) {
                       if (in[0].empty()) return;
                       for (std::size_t o = 0; o < arg.size(); ++o) in[0][arg[o]] += g[o];
                     });
}

}  // namespace gbn::ops
