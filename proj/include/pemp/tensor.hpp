#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pemp {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or arities.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf observed in a value or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autograd graph (non-scalar loss, detached or consumed graph).
class GraphError : public Error {
 public:
  using Error::Error;
};

// Invalid dataset content or arguments.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  double* grad_buffer() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles with optional participation in the
/// reverse-mode graph. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view. Only valid on leaves; the graph never sees the change.
  std::span<double> mutable_data();
  /// Gradient buffer; empty when the tensor does not require grad.
  std::span<const double> grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  void zero_grad();

  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const;

  Tensor detach() const;
  Tensor clone() const;
  bool all_finite() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Whether newly created op results are recorded for backward. Thread-local.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using BackwardFn = std::function<void(const detail::Node& out)>;

/// Wraps an op result. When grad mode is on and any input requires grad,
/// the result joins the graph with `fn` as its backward rule.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, BackwardFn fn);
Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

/// Topologically ordered view of the graph rooted at a loss; each node
/// appears once and after all of its inputs.
class Tape {
 public:
  explicit Tape(const Tensor& root);
  const std::vector<detail::Node*>& nodes() const { return order_; }

 private:
  std::vector<detail::Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every requires-grad leaf reachable from
/// `loss`, then releases the graph. Calling it again on the same graph throws.
void backward(const Tensor& loss);

}  // namespace pemp
