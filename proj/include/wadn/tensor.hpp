#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "wadn/error.hpp"
#include "wadn/rng.hpp"

namespace wadn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Gradient recording is on by default and disabled for inference-only work
// (latency runs, evaluation) through NoGradGuard.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// One node of the recorded computation graph. Forward ops allocate a node
/// per result; `backward_fn` pulls the node's gradient and pushes it into the
/// parents. Data is row-major and immutable once the node is built; only
/// `grad` mutates, and only during a backward pass.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t numel() const { return data.size(); }

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }

  void accumulate_grad(const std::vector<double>& g) {
    double* dst = grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
};

/// The replay order of a backward pass: every node reachable from the root,
/// parents before children, each exactly once.
struct Tape {
  std::vector<TensorNode*> order;

  static Tape record(TensorNode* root) {
    Tape tape;
    std::unordered_set<TensorNode*> visited;
    // Iterative post-order DFS; frame.second is the next parent to visit.
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode* parent = node->parents[next++].get();
        if (visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        tape.order.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
  }

  /// Truncated normal init (|z| <= 2 stddev), values rounded to float32 so a
  /// freshly built model round-trips bit-exactly through f32 checkpoints.
  static Tensor randn_truncated(Shape shape, double stddev, Rng& rng,
                                bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i)
      data[i] = static_cast<double>(static_cast<float>(rng.truncated_normal(stddev)));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t v : idx) flat = flat * node_->shape[i++] + v;
    return node_->data[flat];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  /// The accumulated gradient; zeros if no backward pass reached this tensor.
  Tensor grad() const {
    if (node_->grad.empty()) return Tensor::zeros(node_->shape);
    return Tensor(node_->shape, node_->grad);
  }

  void zero_grad() { node_->grad.clear(); }

  /// A view of the same values with no graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

  /// Reverse-mode sweep from a scalar. Gradients accumulate into every
  /// requires_grad ancestor; each node's rule runs exactly once.
  void backward() {
    if (numel() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    Tape tape = Tape::record(node_.get());
    node_->grad_buffer()[0] = 1.0;
    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
      TensorNode* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

/// Builds the result node of an op: wires parents and decides whether the
/// backward rule needs to be kept.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data));
  bool needs_grad = false;
  if (grad_mode()) {
    for (const Tensor& p : parents)
      if (p.requires_grad()) needs_grad = true;
  }
  if (needs_grad) {
    out.node()->requires_grad = true;
    out.node()->parents.reserve(parents.size());
    for (Tensor& p : parents) out.node()->parents.push_back(p.node());
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

}  // namespace wadn
