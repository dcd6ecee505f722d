#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace plc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded the op creating this tensor
  std::size_t node = 0;            // index of that op on the producer tape
};
}  // namespace detail

// Dense row-major f64 tensor. Copies share storage (handle semantics), which
// is what lets the optimizer update parameters that a module also holds.
// Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor like(const Tensor& other, double fill = 0.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const {
    if (!impl_) undefined_access();
    return impl_->data;
  }
  std::span<double> mutable_data() const {
    if (!impl_) undefined_access();
    return impl_->data;
  }
  std::span<const double> grad() const;
  std::span<double> mutable_grad() const;
  bool has_grad() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  void zero_grad();

  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  Tensor clone() const;
  // Same values, no tape link and no gradient.
  Tensor detach() const;

  const Tape* producer() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  [[noreturn]] static void undefined_access();
  friend class Tape;
  friend Tensor make_op_output(Shape shape, std::vector<double> values,
                               std::string_view op,
                               std::initializer_list<const Tensor*> inputs);
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Records differentiable ops in execution order; backward() replays the
// recorded rules in exact reverse order. A tape belongs to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward_rule);

  // Populates grads of every requires_grad tensor reachable from `loss`.
  // Leaf gradients accumulate across calls; intermediate gradients are
  // reset at the start of each call. The optional observer sees the index
  // of every node whose rule runs, in visit order.
  void backward(const Tensor& loss,
                const std::function<void(std::size_t)>& observer = {});

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_[i].op; }
  void clear();

 private:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward_rule;
  };
  std::vector<Node> nodes_;
};

// Installs a tape as the thread's recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Builds an op result: marks it as requiring grad (and attributes it to the
// active tape) when any input requires grad and a tape is recording. Throws
// NumericError naming `op` when a value is non-finite.
Tensor make_op_output(Shape shape, std::vector<double> values,
                      std::string_view op,
                      std::initializer_list<const Tensor*> inputs);

bool recording(std::initializer_list<const Tensor*> inputs);

}  // namespace plc
