#include "caac/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace caac {

namespace {
thread_local bool g_grad_enabled = true;
constexpr const char* kLeaf = "leaf";
}  // namespace

const char* detail::Node::leaf_tag() noexcept { return kLeaf; }
std::uint64_t detail::Node::next_seq() noexcept {
  static std::uint64_t counter = 0;
  return counter++;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size())
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  check_finite("tensor construction", data);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  check_shape(shape);
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({1}, {v}, requires_grad); }

namespace {
detail::Node& checked(const std::shared_ptr<detail::Node>& n) {
  if (!n) throw GraphError("use of an undefined tensor");
  return *n;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  auto& n = checked(node_);
  if (!n.is_leaf()) throw GraphError("only leaf tensors may be written in place");
  return n.value;
}

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) throw ShapeError("item() requires a one-element tensor, got " + shape_str(n.shape));
  return n.value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  auto& n = checked(node_);
  if (!n.is_leaf()) throw GraphError("requires_grad can only be set on leaves");
  n.requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(node_).is_leaf(); }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const {
  const auto& n = checked(node_);
  if (n.grad.empty()) throw GraphError("tensor has no gradient");
  return n.grad;
}

std::span<double> Tensor::mutable_grad() { return checked(node_).ensure_grad(); }

void Tensor::zero_grad() { checked(node_).grad.clear(); }

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return Tensor(make_leaf(n.shape, n.value, false));
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor detail::make_result(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                           BackwardFn fn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.node()->requires_grad;
    if (any) {
      for (const auto& in : inputs)
        if (in.node()->consumed) throw GraphError(std::string(op) + ": input belongs to a consumed graph");
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
      n->backward_fn = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

Graph Graph::trace(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) throw GraphError("backward seed must be a scalar, got shape " + shape_str(loss.shape()));
  auto* root = loss.node();
  if (root->consumed) throw GraphError("graph already consumed by a previous backward; zero grads and rebuild");
  if (!root->requires_grad) throw GraphError("backward on a detached graph (loss does not require grad)");

  Graph g;
  g.loss_ = loss;
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* in = node->inputs[next++].get();
      if (!in->requires_grad || seen.count(in)) continue;
      if (in->consumed) throw GraphError("graph already consumed by a previous backward");
      seen.insert(in);
      stack.emplace_back(in, 0);
    } else {
      g.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

Graph Graph::reordered(std::vector<detail::Node*> order) const {
  if (order.size() != nodes_.size()) throw GraphError("reordered graph has a different node count");
  std::unordered_map<detail::Node*, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  for (auto* n : nodes_) {
    auto it = pos.find(n);
    if (it == pos.end()) throw GraphError("reordered graph has a different node set");
    for (const auto& in : n->inputs) {
      auto jt = pos.find(in.get());
      if (jt != pos.end() && jt->second >= it->second) throw GraphError("order is not topological");
    }
  }
  Graph g;
  g.loss_ = loss_;
  g.nodes_ = std::move(order);
  return g;
}

Graph Graph::kahn_order() const {
  std::unordered_set<detail::Node*> members(nodes_.begin(), nodes_.end());
  std::unordered_map<detail::Node*, std::size_t> pending;
  std::unordered_map<detail::Node*, std::vector<detail::Node*>> consumers;
  for (auto* n : nodes_) {
    std::size_t deps = 0;
    std::unordered_set<detail::Node*> uniq;
    for (const auto& in : n->inputs)
      if (members.count(in.get()) && uniq.insert(in.get()).second) {
        ++deps;
        consumers[in.get()].push_back(n);
      }
    pending[n] = deps;
  }
  std::vector<detail::Node*> ready;
  for (auto* n : nodes_)
    if (pending[n] == 0) ready.push_back(n);
  std::vector<detail::Node*> order;
  while (!ready.empty()) {
    auto* n = ready.back();
    ready.pop_back();
    order.push_back(n);
    for (auto* c : consumers[n])
      if (--pending[c] == 0) ready.push_back(c);
  }
  return reordered(std::move(order));
}

void Graph::backward() const {
  auto* root = loss_.node();
  if (root->consumed) throw GraphError("graph already consumed by a previous backward; zero grads and rebuild");
  root->ensure_grad()[0] += 1.0;
  // Schedule by creation order, independent of the order of nodes_.
  std::vector<detail::Node*> schedule = nodes_;
  std::sort(schedule.begin(), schedule.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  for (auto* n : schedule) {
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  // Release saved activations and intermediate gradients.
  for (auto* n : nodes_) {
    if (n->is_leaf()) continue;
    n->consumed = true;
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

void backward(const Tensor& loss) { Graph::trace(loss).backward(); }

}  // namespace caac
