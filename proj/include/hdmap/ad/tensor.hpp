#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hdmap/geometry.hpp"

namespace hdmap::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the computation graph. Values are fixed once the node is
/// built; `grad` is written only by backward().
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Reads self.grad and accumulates into parents' grad buffers.
  std::function<void(Node& self)> backward_fn;
};

/// Shared handle to a graph node. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  bool requires_grad() const;

  std::span<const double> values() const;
  /// Writable view for optimizers and parameter surgery. Never call on a
  /// tensor whose dependents are still in use.
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }

  /// Gradient from the last backward() that reached this node; zeros when it
  /// was never reached.
  std::vector<double> grad() const;
  bool has_grad() const;
  std::span<double> grad_buffer();
  void clear_grad();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds a result node. Parents and backward_fn are dropped when no parent
/// requires gradients.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

/// Reverse sweep from a scalar loss. Every node reachable from `loss` that
/// requires gradients gets its grad buffer reset and then filled with the
/// partial derivative of loss.
void backward(const Tensor& loss);

}  // namespace hdmap::ad
