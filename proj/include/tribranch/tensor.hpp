#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace tribranch {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

/// Reverse-mode autodiff is enabled by default; wrap evaluation-only code in
/// a NoGradGuard to skip graph recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until needed, then same length as data
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t size() const { return data.size(); }
  std::vector<double>& ensure_grad();
};

/// Dense rank-1..3 tensor of doubles with value semantics over a shared node.
/// Copies are shallow; the underlying buffer is treated as immutable except
/// through raw() (parameter updates) and grad bookkeeping.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const { return node_->shape[axis]; }
  std::size_t size() const { return node_->data.size(); }

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& raw() { return node_->data; }

  double value() const;  // scalar tensors only
  double operator()(int i) const;
  double operator()(int i, int j) const;
  double operator()(int i, int j, int k) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }
  void zero_grad();

  /// Backpropagate from a scalar output. Seeds d(out)/d(out) = seed and
  /// accumulates into the grad buffers of every requires_grad node reachable
  /// through the recorded graph. Throws on non-scalar tensors.
  void backward(double seed = 1.0) const;

  TensorNode* node() const { return node_.get(); }
  std::shared_ptr<TensorNode> node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_op_output(Shape shape, std::vector<double> data,
                               std::vector<Tensor> inputs,
                               std::function<void(TensorNode&)> backward_fn);
};

// Elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Reductions / shaping
Tensor mean_over_axes(const Tensor& a, const std::set<int>& axes);
Tensor sum(const Tensor& a);
Tensor flatten(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts);

// Structured ops
Tensor conv2d_same(const Tensor& input, const Tensor& kernels,
                   const Tensor& bias);
Tensor depthwise_conv2d_same(const Tensor& input, const Tensor& kernels,
                             const Tensor& bias);
Tensor broadcast_mul(const Tensor& feature, const Tensor& weights, int axis);
Tensor affine(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor max_over_axis(const Tensor& a, int axis);
Tensor max_pool2d(const Tensor& a, int pool_d, int pool_t);

}  // namespace tribranch
