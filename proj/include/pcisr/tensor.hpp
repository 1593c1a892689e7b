#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pcisr/error.hpp"

namespace pcisr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  const Tape* tape = nullptr;  // tape that recorded the op producing this node
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Dense row-major array of doubles. Copies share storage; values are not
// modified after construction except through mutable_data() (optimizer
// updates) and gradient accumulation.
class Tensor {
 public:
  // Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const noexcept { return node_->shape; }
  std::size_t ndim() const noexcept { return node_->shape.size(); }
  std::size_t numel() const noexcept { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const;

  std::span<const double> data() const noexcept { return node_->data; }
  std::vector<double> to_vector() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  // Value of a single-element tensor.
  double item() const;

  // In-place access for parameter updates. Not recorded on any tape.
  std::span<double> mutable_data() noexcept { return node_->data; }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool value) noexcept { node_->requires_grad = value; }

  bool has_grad() const noexcept { return !node_->grad.empty(); }
  // Accumulated gradient; zeros when none has been accumulated.
  Tensor grad() const;
  std::span<const double> grad_data() const noexcept { return node_->grad; }
  void zero_grad() noexcept { node_->grad.clear(); }

  // Deep copy that is not connected to any tape.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  bool same_storage(const Tensor& other) const noexcept {
    return node_ == other.node_;
  }

  const detail::NodePtr& node() const noexcept { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  friend Tensor record_op(Shape, std::vector<double>, std::vector<Tensor>,
                          std::function<void(std::span<const double>,
                                             std::span<const std::span<double>>)>);

  detail::NodePtr node_;
};

// Receives the gradient of the op output and one span per input. A span is
// empty when that input does not take part in differentiation.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const std::span<double>> grad_in)>;

// Ordered record of differentiable operations executed while the tape is
// active on the current thread. backward() replays them in exact reverse
// order, after which the tape is consumed.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::vector<detail::NodePtr> inputs, detail::NodePtr output,
              BackwardFn backward);
  void backward(const Tensor& root);

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool tracks(const detail::Node& node) const noexcept {
    return node.requires_grad || node.tape == this;
  }

 private:
  struct Entry {
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// Tape receiving ops on this thread, or nullptr.
Tape* active_tape() noexcept;

// Activates a tape for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) noexcept;
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the lifetime of the scope.
class NoGradScope {
 public:
  NoGradScope() noexcept;
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Builds an op result. When a tape is active and any input is tracked by it,
// the op is recorded with the given backward function. Throws NumericError if
// any value is not finite.
Tensor record_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn backward);

struct ValueAndGrad {
  double value = 0.0;
  std::vector<Tensor> grads;  // one per input, same shapes
};

// Evaluates a scalar function on a fresh tape and returns its value together
// with the gradient of every input. Existing gradients on the inputs are
// cleared first; inputs that do not require grad get zero gradients.
ValueAndGrad value_and_grad(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            const std::vector<Tensor>& inputs);

}  // namespace pcisr
