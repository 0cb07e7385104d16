#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <type_traits>
#include <variant>
#include <vector>

#include "gbn/data.hpp"
#include "gbn/deviation.hpp"
#include "gbn/gbn_layer.hpp"
#include "gbn/ops.hpp"
#include "gbn/rng.hpp"
#include "gbn/tensor.hpp"

namespace gbn::nn {

enum class LayerKind { dense, conv2d, relu, gbn, flatten, maxpool };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;   // dense outputs or conv filters
  std::size_t kernel = 0;  // conv kernel side or pool window
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::optional<DeviationSpec> deviation;  // gbn only

  static LayerSpec dense(std::size_t units) { return {LayerKind::dense, units, 0, 1, 0, {}}; }
  static LayerSpec conv2d(std::size_t filters, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0) {
    return {LayerKind::conv2d, filters, kernel, stride, padding, {}};
  }
  static LayerSpec relu() { return {}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 1, 0, {}}; }
  static LayerSpec maxpool(std::size_t size = 2, std::size_t stride = 2) {
    return {LayerKind::maxpool, 0, size, stride, 0, {}};
  }
  static LayerSpec gbn(DeviationSpec spec) {
    return {LayerKind::gbn, 0, 0, 1, 0, spec};
  }
};

struct GbnOptions {
  double epsilon = 1e-5;
  double momentum = 0.1;
};

struct DenseLayer {
  Tensor weight;  // [in × out]
  Tensor bias;    // [out]
};

struct ConvLayer {
  Tensor weight;  // [F × C × k × k]
  Tensor bias;    // [F]
  ops::Conv2dOptions options;
};

struct ReluLayer {};
struct FlattenLayer {};
struct MaxPoolLayer {
  std::size_t size = 2;
  std::size_t stride = 2;
};

using Layer = std::variant<DenseLayer, ConvLayer, ReluLayer, GbnState, FlattenLayer, MaxPoolLayer>;

using NamedTensor = std::pair<std::string, Tensor>;

/// Sequential network with a name → tensor parameter registry.
///
/// Moving is cheap; copying is explicit through `clone()` because tensors
/// are shared handles.
class Model {
 public:
  /// Checks that adjacent layers compose for per-example `input_shape`
  /// ({features} or {C, H, W}) and draws every weight and bias from
  /// U(−√(1/fan_in), √(1/fan_in)) in layer order.
  static Model build(Shape input_shape, const std::vector<LayerSpec>& specs,
                     std::uint64_t seed, GbnOptions gbn_opts = {}) {
    Model m;
    m.input_shape_ = input_shape;
    m.seed_ = seed;
    Rng rng(seed);
    Shape cur = std::move(input_shape);
    auto fail = [&](std::size_t i, const std::string& why) {
      throw ShapeError("layer " + std::to_string(i) + ": " + why + " (input " +
                       to_string(cur) + ")");
    };
    auto init = [&](Shape shape, std::size_t fan_in) {
      const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
      std::vector<double> v(numel(shape));
      for (auto& w : v) w = rng.uniform(-bound, bound);
      return Tensor(std::move(shape), std::move(v), true);
    };
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& s = specs[i];
      switch (s.kind) {
        case LayerKind::dense: {
          if (cur.size() != 1) fail(i, "dense needs flat input");
          if (s.units == 0) fail(i, "dense with zero units");
          DenseLayer d;
          d.weight = init({cur[0], s.units}, cur[0]);
          d.bias = init({s.units}, cur[0]);
          m.layers_.emplace_back(std::move(d));
          cur = {s.units};
          break;
        }
        case LayerKind::conv2d: {
          if (cur.size() != 3) fail(i, "conv2d needs C×H×W input");
          if (s.units == 0 || s.kernel == 0 || s.stride == 0) fail(i, "bad conv2d geometry");
          const std::size_t ph = cur[1] + 2 * s.padding, pw = cur[2] + 2 * s.padding;
          if (s.kernel > ph || s.kernel > pw) fail(i, "kernel larger than padded input");
          const std::size_t fan_in = cur[0] * s.kernel * s.kernel;
          ConvLayer c;
          c.weight = init({s.units, cur[0], s.kernel, s.kernel}, fan_in);
          c.bias = init({s.units}, fan_in);
          c.options = {s.stride, s.padding};
          m.layers_.emplace_back(std::move(c));
          cur = {s.units, (ph - s.kernel) / s.stride + 1, (pw - s.kernel) / s.stride + 1};
          break;
        }
        case LayerKind::relu:
          m.layers_.emplace_back(ReluLayer{});
          break;
        case LayerKind::gbn:
          if (cur.size() != 1 && cur.size() != 3) fail(i, "gbn needs features or C×H×W");
          if (!s.deviation) fail(i, "gbn layer without a deviation spec");
          m.layers_.emplace_back(
              GbnState(cur[0], *s.deviation, gbn_opts.epsilon, gbn_opts.momentum));
          break;
        case LayerKind::flatten:
          m.layers_.emplace_back(FlattenLayer{});
          cur = {numel(cur)};
          break;
        case LayerKind::maxpool:
          if (cur.size() != 3) fail(i, "maxpool needs C×H×W input");
          if (s.kernel == 0 || s.stride == 0 || s.kernel > cur[1] || s.kernel > cur[2])
            fail(i, "bad pooling window");
          m.layers_.emplace_back(MaxPoolLayer{s.kernel, s.stride});
          cur = {cur[0], (cur[1] - s.kernel) / s.stride + 1, (cur[2] - s.kernel) / s.stride + 1};
          break;
      }
    }
    m.output_shape_ = cur;
    m.rebuild_registry();
    return m;
  }

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const {
    Model m;
    m.input_shape_ = input_shape_;
    m.output_shape_ = output_shape_;
    m.seed_ = seed_;
    for (const auto& layer : layers_) {
      m.layers_.push_back(std::visit(
          [](const auto& l) -> Layer {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, DenseLayer>) {
              return DenseLayer{l.weight.clone(), l.bias.clone()};
            } else if constexpr (std::is_same_v<L, ConvLayer>) {
              return ConvLayer{l.weight.clone(), l.bias.clone(), l.options};
            } else if constexpr (std::is_same_v<L, GbnState>) {
              return l.clone();
            } else {
              return l;
            }
          },
          layer));
    }
    m.rebuild_registry();
    return m;
  }

  /// Runs the network on a batch. `x` may be [N × input_shape] or any shape
  /// with N·|input_shape| elements. When `trace` is given it receives the
  /// output of every layer.
  Tensor forward(Tape& tape, const Tensor& x, Mode mode, std::vector<Tensor>* trace = nullptr) {
    const std::size_t per = numel(input_shape_);
    if (x.rank() == 0 || x.size() != x.dim(0) * per) {
      throw ShapeError("model input " + to_string(x.shape()) + " does not hold examples of " +
                       to_string(input_shape_));
    }
    Shape want{x.dim(0)};
    want.insert(want.end(), input_shape_.begin(), input_shape_.end());
    Tensor h = x.shape() == want ? x : ops::reshape(tape, x, want);
    if (trace) trace->clear();
    for (auto& layer : layers_) {
      h = std::visit(
          [&](auto& l) -> Tensor {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, DenseLayer>) {
              return ops::add_bias(tape, ops::matmul(tape, h, l.weight), l.bias);
            } else if constexpr (std::is_same_v<L, ConvLayer>) {
              return ops::add_bias(tape, ops::conv2d(tape, h, l.weight, l.options), l.bias);
            } else if constexpr (std::is_same_v<L, ReluLayer>) {
              return ops::relu(tape, h);
            } else if constexpr (std::is_same_v<L, GbnState>) {
              l.mode = mode;
              return gbn_forward(tape, l, h);
            } else if constexpr (std::is_same_v<L, FlattenLayer>) {
              return ops::flatten(tape, h);
            } else {
              return ops::maxpool2d(tape, h, l.size, l.stride);
            }
          },
          layer);
      if (trace) trace->push_back(h);
    }
    return h;
  }

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  std::vector<std::size_t> gbn_layer_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::holds_alternative<GbnState>(layers_[i])) idx.push_back(i);
    return idx;
  }

  void clear_grads() {
    for (auto& [name, t] : params_) t.clear_grad();
  }

 private:
  Model() = default;

  void rebuild_registry() {
    params_.clear();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      std::visit(
          [&](auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, DenseLayer> || std::is_same_v<L, ConvLayer>) {
              params_.emplace_back(p + "weight", l.weight);
              params_.emplace_back(p + "bias", l.bias);
            } else if constexpr (std::is_same_v<L, GbnState>) {
              params_.emplace_back(p + "gamma", l.gamma);
              params_.emplace_back(p + "beta", l.beta);
            }
          },
          layers_[i]);
    }
  }

  Shape input_shape_;
  Shape output_shape_;
  std::uint64_t seed_ = 0;
  std::vector<Layer> layers_;
  std::vector<NamedTensor> params_;
};

/// conv(5×5, 20) → GBN → ReLU → maxpool(2) → conv(5×5, 50) → GBN → ReLU →
/// maxpool(2) → flatten → dense(500) → ReLU → dense(classes), on 1×28×28.
inline Model build_lenet_small(std::size_t classes, const DeviationSpec& spec,
                               std::uint64_t seed, GbnOptions opts = {}) {
  if (classes < 2) throw std::invalid_argument("build_lenet_small: need at least 2 classes");
  return Model::build({1, 28, 28},
                      {LayerSpec::conv2d(20, 5), LayerSpec::gbn(spec), LayerSpec::relu(),
                       LayerSpec::maxpool(), LayerSpec::conv2d(50, 5), LayerSpec::gbn(spec),
                       LayerSpec::relu(), LayerSpec::maxpool(), LayerSpec::flatten(),
                       LayerSpec::dense(500), LayerSpec::relu(), LayerSpec::dense(classes)},
                      seed, opts);
}

/// dense(hidden) → GBN → ReLU → dense(classes).
inline Model build_mlp(std::size_t inputs, std::size_t hidden, std::size_t classes,
                       const DeviationSpec& spec, std::uint64_t seed, GbnOptions opts = {}) {
  if (classes < 2) throw std::invalid_argument("build_mlp: need at least 2 classes");
  return Model::build({inputs},
                      {LayerSpec::dense(hidden), LayerSpec::gbn(spec), LayerSpec::relu(),
                       LayerSpec::dense(classes)},
                      seed, opts);
}

inline Model build_mlp_small(const DeviationSpec& spec, std::uint64_t seed,
                             GbnOptions opts = {}) {
  return build_mlp(784, 128, 10, spec, seed, opts);
}

/// p ← p − lr·grad for every parameter, then clears the gradients.
inline void sgd_step(Model& model, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("sgd_step: learning rate must be finite and >= 0");
  }
  for (const auto& [name, t] : model.parameters())
    if (!t.has_grad()) throw std::logic_error("sgd_step: missing gradient for " + name);
  for (auto& [name, t] : model.parameters()) {
    auto p = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
    t.clear_grad();
  }
}

/// Index of the largest logit in each row, lowest index on ties.
inline std::vector<int> predict(std::span<const double> logits, std::size_t classes) {
  std::vector<int> out(logits.size() / classes);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < classes; ++j)
      if (logits[i * classes + j] > logits[i * classes + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// 100 · #misclassified / #examples.
inline double error_rate(std::span<const double> logits, std::size_t classes,
                         std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("error_rate: empty dataset");
  if (logits.size() != labels.size() * classes)
    throw ShapeError("error_rate: logits do not match labels");
  const auto pred = predict(logits, classes);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += pred[i] != labels[i];
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
}

/// Test error (%) in inference mode; GBN layers use their running statistics.
inline double evaluate_error_rate(Model& model, const data::Dataset& ds,
                                  std::size_t batch_size = 500) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate_error_rate: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate_error_rate: batch_size must be >= 1");
  const std::size_t classes = numel(model.output_shape());
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < ds.size(); at += batch_size) {
    idx.clear();
    for (std::size_t i = at; i < std::min(ds.size(), at + batch_size); ++i) idx.push_back(i);
    auto [x, y] = ds.gather(idx);
    Tape tape(false);
    const auto logits = model.forward(tape, x, Mode::infer);
    const auto pred = predict(logits.data(), classes);
    for (std::size_t i = 0; i < y.size(); ++i) wrong += pred[i] != y[i];
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(ds.size());
}

}  // namespace gbn::nn
