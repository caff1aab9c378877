#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "iau/error.hpp"

namespace iau {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename Real>
struct Node;

template <typename Real>
using NodePtr = std::shared_ptr<Node<Real>>;

// One recorded value in the autodiff graph. `backward` reads `grad` and
// accumulates into the grads of `inputs`.
template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  const char* op = "leaf";
  std::vector<NodePtr<Real>> inputs;
  std::function<void(Node&)> backward;

  // Allocates a zero gradient buffer when absent and returns it.
  std::vector<Real>& ensure_grad();
};

// Gradient recording is disabled for the lifetime of a guard on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Monotone per-thread counter used to stamp nodes in recording order.
std::uint64_t next_sequence();

template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor from_node(NodePtr<Real> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  // Direct write access; reserved for parameter initialization and updates.
  std::span<Real> mutable_data() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  Real item() const;
  Real at(std::initializer_list<std::size_t> index) const;

  const NodePtr<Real>& node() const { return node_; }
  const char* op() const { return node_->op; }

  // Copy of the values with no graph history.
  Tensor detach() const;

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(node_->value.begin(), node_->value.end());
    return Tensor<Other>(node_->shape, std::move(out), node_->requires_grad);
  }

 private:
  NodePtr<Real> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Ordered view of the graph reachable from a root, in recording order.
// Replaying runs each node's backward rule exactly once, newest first.
template <typename Real>
class Tape {
 public:
  explicit Tape(const Tensor<Real>& root);

  std::span<const NodePtr<Real>> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1 and propagates to every node on the tape.
  // `visit`, when set, is called once per node in replay order.
  void backward(const std::function<void(const Node<Real>&)>& visit = {});

  // Zeroes every gradient buffer held by nodes on the tape.
  void clear();

 private:
  NodePtr<Real> root_;
  std::vector<NodePtr<Real>> nodes_;
};

// Accumulates d(loss)/d(x) into every requires_grad tensor reachable from
// `loss`. Throws ContractError unless `loss` holds exactly one element.
template <typename Real>
void backward(const Tensor<Real>& loss);

// Creates an op result. Records `inputs` and `rule` only when gradient
// recording is on and some input requires a gradient. Throws NumericError
// when any value is not finite.
template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         std::vector<Tensor<Real>> inputs,
                         std::function<void(Node<Real>&)> rule);

}  // namespace iau
