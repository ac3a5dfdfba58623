#pragma once

// Dense double-precision tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle to a shared node. Ops create new nodes that
// remember their inputs and a backward closure; backward() walks the graph
// from a scalar loss in reverse topological order and accumulates gradients
// into every node that requires them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace caac {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, log of non-positive numbers, division by zero.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Misuse of the differentiation graph (non-scalar seed, detached or
/// already-consumed graph).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads out.grad and accumulates into out.inputs[i]->grad.
  std::function<void(Node& out)> backward_fn;
  // Creation order; backward runs in descending seq.
  std::uint64_t seq = next_seq();

  bool is_leaf() const noexcept { return op == leaf_tag(); }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
  static const char* leaf_tag() noexcept;
  static std::uint64_t next_seq() noexcept;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable storage. Only leaves may be written (parameters, buffers).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Copy of the value with no graph history.
  Tensor detach() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered view of the nodes reachable from a scalar loss.
class Graph {
 public:
  /// Depth-first post-order trace; inputs always precede consumers.
  static Graph trace(const Tensor& loss);

  std::span<detail::Node* const> nodes() const noexcept { return nodes_; }
  const Tensor& loss() const noexcept { return loss_; }

  /// Same node set in a different order. Throws GraphError unless the order
  /// is a valid topological order of this graph.
  Graph reordered(std::vector<detail::Node*> order) const;

  /// Kahn's algorithm with the ready set popped last-in-first-out, which
  /// generally differs from the depth-first order.
  Graph kahn_order() const;

  /// Seeds d(loss)/d(loss) = 1 and runs every backward closure once, in
  /// reverse order. Consumes the graph.
  void backward() const;

 private:
  Tensor loss_;
  std::vector<detail::Node*> nodes_;
};

void backward(const Tensor& loss);

bool grad_enabled() noexcept;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

using BackwardFn = std::function<void(Node& out)>;

/// Wraps a freshly computed value as a graph node. Rejects non-finite
/// values. The backward closure is kept only when grad mode is on and some
/// input requires a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, BackwardFn fn);

inline bool wants_grad(const Node& n) { return n.requires_grad; }

}  // namespace detail

}  // namespace caac
