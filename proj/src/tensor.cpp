#include "pemp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace pemp {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) {
  auto n = shape_numel(shape);
  node_ = new_node(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : node_(new_node(std::move(shape), std::move(values))) {}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw GraphError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (!node_->is_leaf) throw GraphError("mutable_data() on a non-leaf tensor");
  return node_->data;
}

std::span<const double> Tensor::grad() const {
  shape();
  return node_->grad;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  shape();
  if (!node_->is_leaf) throw GraphError("requires_grad can only be toggled on leaves");
  node_->requires_grad = flag;
  if (flag) {
    node_->grad.assign(node_->data.size(), 0.0);
  } else {
    node_->grad.clear();
  }
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf; }

void Tensor::zero_grad() {
  shape();
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t c, std::size_t y, std::size_t x) const {
  const auto& s = shape();
  if (s.size() != 3) throw DimensionError("at(c,y,x) needs a rank-3 tensor");
  return node_->data[(c * s[1] + y) * s[2] + x];
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (requires_grad() && is_leaf()) {
    t.node_->requires_grad = true;
    t.node_->grad = node_->grad;
    if (t.node_->grad.empty()) t.node_->grad.assign(t.node_->data.size(), 0.0);
  }
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn fn) {
  auto node = new_node(std::move(shape), std::move(data));
  if (!g_grad_enabled) return Tensor::from_node(std::move(node));
  bool any = false;
  for (const auto& in : inputs) {
    if (in.node()->consumed) throw GraphError("op input belongs to an already-consumed graph");
    any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn fn) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs),
                     std::move(fn));
}

Tape::Tape(const Tensor& root) {
  // Iterative post-order DFS over nodes that participate in the graph.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  detail::Node* start = root.node().get();
  stack.emplace_back(start, 0);
  visited.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw GraphError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto* root = loss.node().get();
  if (root->consumed) throw GraphError("graph already consumed by a previous backward()");
  if (!root->requires_grad) throw GraphError("loss is detached from every trainable leaf");
  if (!loss.all_finite()) throw NumericError("non-finite loss");

  Tape tape(loss);
  for (auto* n : tape.nodes()) {
    if (!n->is_leaf && n->consumed) throw GraphError("graph already consumed by a previous backward()");
  }
  root->grad_buffer()[0] += 1.0;
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf) continue;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (auto* n : order) {
    if (n->is_leaf) {
      for (double g : n->grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in leaf of shape " + shape_str(n->shape));
      }
      continue;
    }
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace pemp
