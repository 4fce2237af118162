#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "oatr/errors.hpp"

namespace oatr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Row-major dense storage shared by every tensor. An N-d tensor of shape
/// [d0, ..., dn] is stored as a (d0*...*d(n-1)) x dn matrix, so the buffer
/// order is the usual row-major N-d order.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

/// Matrix extents used to store a tensor of the given shape.
inline std::pair<Index, Index> storage_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, shape[0]};
  return {numel(shape) / (shape.back() == 0 ? 1 : shape.back()), shape.back()};
}

namespace detail {

template <typename Scalar>
struct Node {
  Shape shape;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents
};

template <typename Scalar, typename Derived>
void accumulate(Node<Scalar>& node, const Eigen::MatrixBase<Derived>& delta) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = delta;
  } else {
    node.grad += delta;
  }
}

}  // namespace detail

/// Handle to a node of the reverse-mode graph. Copies share the node.
/// Values are immutable once an op has produced them; only leaves expose
/// mutable storage (for optimizers and finite differences).
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using Mat = Matrix<Scalar>;

  Tensor() = default;

  static Tensor leaf(Shape shape, Mat value, bool requires_grad = false) {
    auto [rows, cols] = storage_dims(shape);
    if (value.rows() != rows || value.cols() != cols) {
      throw DimensionError("tensor storage " + std::to_string(value.rows()) + "x" +
                           std::to_string(value.cols()) + " does not match shape " +
                           shape_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_matrix(Mat value, bool requires_grad = false) {
    Shape shape{value.rows(), value.cols()};
    return leaf(std::move(shape), std::move(value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto [rows, cols] = storage_dims(shape);
    return leaf(std::move(shape), Mat::Zero(rows, cols), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Mat m(1, 1);
    m(0, 0) = v;
    return leaf({}, std::move(m), requires_grad);
  }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& values,
                            bool requires_grad = false) {
    if (static_cast<Index>(values.size()) != numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_string(shape));
    }
    auto [rows, cols] = storage_dims(shape);
    Mat m = Eigen::Map<const Mat>(values.data(), rows, cols);
    return leaf(std::move(shape), std::move(m), requires_grad);
  }

  /// Result of an op. Parents and the backward rule are dropped when no
  /// parent tracks gradients, so inference builds no graph.
  static Tensor make(Shape shape, Mat value, std::vector<Tensor> parents,
                     std::function<void(Node&)> backward, const char* op) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
    if (node->requires_grad) {
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index extent(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  const Mat& value() const { return node_->value; }
  const Scalar* data() const { return node_->value.data(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  Scalar item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_string(shape()));
    }
    return node_->value(0, 0);
  }

  bool has_grad() const { return node_->grad.size() != 0; }

  /// Gradient, or zeros of the value's extent when none has been accumulated.
  Mat grad() const {
    if (has_grad()) return node_->grad;
    return Mat::Zero(rows(), cols());
  }

  void zero_grad() { node_->grad.resize(0, 0); }

  /// Mutable storage; leaves only.
  Mat& mutable_value() {
    if (!node_->parents.empty() || node_->backward) {
      throw ContractError("mutable_value() on non-leaf tensor produced by " +
                          std::string(node_->op));
    }
    return node_->value;
  }

  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls.
  void backward() const {
    if (size() != 1) {
      throw ContractError("backward() requires a scalar, got shape " + shape_string(shape()));
    }
    if (!requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    node_->grad = Mat::Ones(1, 1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward && node->grad.size() != 0) node->backward(*node);
    }
  }

  /// Same values, detached from the graph.
  Tensor detach() const { return leaf(shape(), value(), false); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>::leaf(shape(), value().template cast<Other>(), requires_grad());
  }

  Node& node() const { return *node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

}  // namespace oatr
