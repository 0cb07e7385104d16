#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gbn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Thrown on incompatible extents; the message names the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient"
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: not produced by any tape
  std::size_t node = 0;       // record index + 1 on the producing tape
};

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

/// Dense row-major tensor handle.
///
/// Copies share storage (like a reference-counted array); use `clone()` for an
/// independent copy. Leaves created with `requires_grad` accumulate gradient
/// from every tape they take part in until `clear_grad()` is called.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(1, 0.0);
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + gbn::to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values), requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Parameter updates only; tensors recorded on a live tape must not change.
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + gbn::to_string(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void clear_grad() { impl_->grad.clear(); }

  // True when gradients flow into or through this tensor.
  bool tracked() const { return impl_->requires_grad || impl_->tape_id != 0; }

  Tensor clone() const {
    Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
  }

  Tensor detach() const { return Tensor(impl_->shape, impl_->data, false); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations.
///
/// Each primitive appends one record (inputs, output, backward rule). A tape
/// can be run backward exactly once; a second call throws. Gradients of
/// `requires_grad` leaves accumulate additively across separate tapes.
class Tape {
 public:
  // The rule receives the output gradient and one span per input; spans of
  // inputs that do not take gradient are empty. Rules must accumulate (+=).
  using BackwardRule = std::function<void(std::span<const double> out_grad,
                                          std::span<const std::span<double>> in_grads)>;

  explicit Tape(bool recording = true)
      : id_(detail::next_tape_id()), recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }
  bool backward_done() const { return backward_done_; }

  /// Builds a fresh output tensor and records it when any input is tracked.
  Tensor record(std::string name, std::vector<Tensor> inputs, Shape out_shape,
                std::vector<double> out_data, BackwardRule rule) {
    Tensor out(std::move(out_shape), std::move(out_data));
    if (!recording_) return out;
    bool any_tracked = false;
    for (const auto& in : inputs) {
      const auto tid = in.impl_->tape_id;
      if (tid != 0 && tid != id_) {
        throw std::logic_error(name + ": input was produced by a different tape");
      }
      any_tracked = any_tracked || in.tracked();
    }
    if (!any_tracked) return out;
    if (backward_done_) {
      throw std::logic_error(name + ": tape already ran backward");
    }
    out.impl_->tape_id = id_;
    out.impl_->node = records_.size() + 1;
    Record r;
    r.name = std::move(name);
    r.inputs.reserve(inputs.size());
    for (auto& in : inputs) r.inputs.push_back(std::move(in.impl_));
    r.output = out.impl_;
    r.rule = std::move(rule);
    records_.push_back(std::move(r));
    return out;
  }

  /// Seeds d(loss)/d(loss) = 1 and walks the records in reverse order.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " +
                       gbn::to_string(loss.shape()));
    }
    if (backward_done_) {
      throw std::logic_error("backward called twice on the same tape");
    }
    if (loss.impl_->tape_id != id_) {
      throw std::logic_error("backward: loss is not recorded on this tape");
    }
    backward_done_ = true;
    auto& seed = loss.impl_->grad;
    if (seed.empty()) seed.assign(1, 0.0);
    seed[0] += 1.0;

    std::vector<std::span<double>> in_grads;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      auto& out = *it->output;
      if (out.grad.empty()) continue;  // not reachable from the loss
      in_grads.clear();
      for (auto& in : it->inputs) {
        const bool takes_grad =
            in->requires_grad || (in->tape_id == id_ && in->node != 0);
        if (!takes_grad) {
          in_grads.emplace_back();
          continue;
        }
        if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0);
        in_grads.emplace_back(in->grad);
      }
      it->rule(out.grad, in_grads);
    }
  }

 private:
  struct Record {
    std::string name;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardRule rule;
  };

  std::uint64_t id_;
  bool recording_;
  bool backward_done_ = false;
  std::vector<Record> records_;
};

}  // namespace gbn
