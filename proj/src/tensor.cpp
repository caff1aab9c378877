#include "iau/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace iau {

namespace {
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_sequence = 0;
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }
std::uint64_t next_sequence() { return ++t_sequence; }

template <typename Real>
std::vector<Real>& Node<Real>::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
  return grad;
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimension must be positive, got " + to_string(shape));
  }
  if (iau::numel(shape) != data.size()) {
    throw DimensionError("shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<Node<Real>>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
  node_->sequence = next_sequence();
}

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
  auto n = iau::numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

template <typename Real>
std::size_t Tensor<Real>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  }
  return node_->shape[axis];
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  node_->grad.assign(node_->value.size(), Real(0));
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename Real>
Real Tensor<Real>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range for " + to_string(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename Real>
Tape<Real>::Tape(const Tensor<Real>& root) : root_(root.node()) {
  // Iterative post-order DFS, then order by recording stamp so the tape
  // matches the order in which operations ran.
  std::unordered_set<const Node<Real>*> seen;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack;
  if (!root_) return;
  stack.emplace_back(root_.get(), 0);
  seen.insert(root_.get());
  std::vector<NodePtr<Real>> order;
  std::vector<NodePtr<Real>> holders{root_};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& child = node->inputs[next++];
      if (child && seen.insert(child.get()).second) {
        holders.push_back(child);
        stack.emplace_back(child.get(), 0);
      }
    } else {
      stack.pop_back();
    }
  }
  nodes_ = std::move(holders);
  std::stable_sort(nodes_.begin(), nodes_.end(),
                   [](const auto& a, const auto& b) { return a->sequence < b->sequence; });
}

template <typename Real>
void Tape<Real>::backward(const std::function<void(const Node<Real>&)>& visit) {
  if (!root_) throw ContractError("backward on empty tape");
  if (root_->value.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(root_->shape));
  }
  root_->ensure_grad()[0] += Real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& node = **it;
    if (visit) visit(node);
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

template <typename Real>
void Tape<Real>::clear() {
  for (auto& n : nodes_) {
    if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), Real(0));
  }
}

template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  Tape<Real>(loss).backward();
}

template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         std::vector<Tensor<Real>> inputs,
                         std::function<void(Node<Real>&)> rule) {
  for (const auto& v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->sequence = next_sequence();
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(rule);
  }
  return Tensor<Real>::from_node(std::move(node));
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template Tensor<float> make_result<float>(const char*, Shape, std::vector<float>,
                                          std::vector<Tensor<float>>,
                                          std::function<void(Node<float>&)>);
template Tensor<double> make_result<double>(const char*, Shape, std::vector<double>,
                                            std::vector<Tensor<double>>,
                                            std::function<void(Node<double>&)>);

}  // namespace iau
