#include "plc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "plc/error.hpp"

namespace plc {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, value); }

Tensor Tensor::like(const Tensor& other, double fill) {
  return Tensor(other.shape(), fill);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return data().size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

void Tensor::undefined_access() { throw Error("tensor: use of undefined tensor"); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor: no gradient buffer");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (!has_grad()) throw Error("tensor: no gradient buffer");
  return impl_->grad;
}

bool Tensor::has_grad() const {
  return impl_ && impl_->requires_grad &&
         impl_->grad.size() == impl_->data.size();
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw Error("tensor: use of undefined tensor");
  impl_->requires_grad = on;
  if (on) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
  }
  return *this;
}

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("tensor: item() on shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t(shape(), std::vector<double>(data().begin(), data().end()));
  if (requires_grad()) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::detach() const {
  return Tensor(shape(), std::vector<double>(data().begin(), data().end()));
}

const Tape* Tensor::producer() const {
  return impl_ ? impl_->producer : nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) {
    return t && t->defined() && t->requires_grad();
  });
}

Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::string_view op,
                      std::initializer_list<const Tensor*> inputs) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite output at flat index " +
                         std::to_string(i) + " (shape " + shape_str(shape) +
                         ")");
    }
  }
  Tensor out(std::move(shape), std::move(values));
  if (recording(inputs)) {
    out.set_requires_grad(true);
    out.impl_->producer = g_active_tape;
  }
  return out;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

void Tape::record(std::string_view op, std::vector<Tensor> inputs,
                  Tensor output, std::function<void()> backward_rule) {
  if (output.producer() != this) {
    throw Error("tape: output of " + std::string(op) +
                " was not created while this tape was active");
  }
  output.impl_->node = nodes_.size();
  nodes_.push_back(
      Node{std::string(op), std::move(inputs), std::move(output),
           std::move(backward_rule)});
}

void Tape::backward(const Tensor& loss,
                    const std::function<void(std::size_t)>& observer) {
  if (!loss.defined()) throw Error("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (loss.producer() != this) {
    throw Error("backward: loss was not recorded on this tape");
  }

  // Intermediates start from zero on every pass; leaves keep accumulating.
  for (auto& node : nodes_) node.output.zero_grad();
  const std::size_t loss_node = loss.impl_->node;
  if (loss_node >= nodes_.size() ||
      !nodes_[loss_node].output.same_storage(loss)) {
    throw Error("backward: loss node is no longer on this tape");
  }
  std::vector<char> reached(nodes_.size(), 0);
  Tensor seed = loss;
  seed.mutable_grad()[0] = 1.0;
  reached[loss_node] = 1;

  for (std::size_t i = loss_node + 1; i-- > 0;) {
    if (!reached[i]) continue;
    if (observer) observer(i);
    nodes_[i].backward_rule();
    for (const auto& in : nodes_[i].inputs) {
      if (in.producer() == this) reached[in.impl_->node] = 1;
    }
  }
}

void Tape::clear() { nodes_.clear(); }

}  // namespace plc
