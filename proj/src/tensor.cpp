#include "pcisr/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace pcisr {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("tensor values must be finite");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= ndim()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  }
  return node_->shape[axis];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != ndim()) throw ShapeError("index rank mismatch for " + shape_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw ShapeError("index out of range for " + shape_string(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->data[0];
}

Tensor Tensor::grad() const {
  if (node_->grad.empty()) return Tensor::zeros(shape());
  return Tensor(shape(), node_->grad);
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

void Tape::record(std::vector<detail::NodePtr> inputs, detail::NodePtr output, BackwardFn backward) {
  if (consumed_) throw TapeError("cannot record on a consumed tape");
  output->tape = this;
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& root) {
  if (consumed_) throw TapeError("backward called on a consumed tape");
  if (root.numel() != 1) {
    throw TapeError("backward needs a scalar root, got " + shape_string(root.shape()));
  }
  consumed_ = true;
  auto& root_node = *root.node();
  if (!tracks(root_node)) {
    entries_.clear();
    return;
  }
  if (root_node.grad.empty()) root_node.grad.assign(1, 0.0);
  root_node.grad[0] += 1.0;

  std::vector<std::span<double>> grad_in;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& entry = *it;
    if (entry.output->grad.empty()) continue;
    grad_in.clear();
    for (auto& input : entry.inputs) {
      if (tracks(*input)) {
        if (input->grad.empty()) input->grad.assign(input->data.size(), 0.0);
        grad_in.emplace_back(input->grad);
      } else {
        grad_in.emplace_back();
      }
    }
    entry.backward(entry.output->grad, grad_in);
    // Intermediate results are not reachable from the caller once replayed.
    entry.backward = nullptr;
  }
  entries_.clear();
}

Tape* active_tape() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) noexcept : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() noexcept : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tensor record_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("op result shape " + shape_string(shape) + " does not match its data");
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("operation produced a non-finite value");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tensor out(node);

  Tape* tape = g_active_tape;
  if (tape == nullptr || !backward) return out;
  bool any_tracked = false;
  for (const auto& in : inputs) any_tracked = any_tracked || tape->tracks(*in.node());
  if (!any_tracked) return out;

  std::vector<detail::NodePtr> nodes;
  nodes.reserve(inputs.size());
  for (const auto& in : inputs) nodes.push_back(in.node());
  tape->record(std::move(nodes), node, std::move(backward));
  return out;
}

ValueAndGrad value_and_grad(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            const std::vector<Tensor>& inputs) {
  for (auto in : inputs) in.zero_grad();
  Tape tape;
  Tensor out;
  {
    TapeScope scope(tape);
    out = f(inputs);
  }
  if (out.numel() != 1) {
    throw TapeError("value_and_grad needs a scalar-valued function, got " + shape_string(out.shape()));
  }
  tape.backward(out);
  ValueAndGrad result;
  result.value = out.item();
  result.grads.reserve(inputs.size());
  for (const auto& in : inputs) result.grads.push_back(in.grad());
  return result;
}

}  // namespace pcisr
