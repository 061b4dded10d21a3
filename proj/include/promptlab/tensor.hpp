#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace promptlab {

namespace detail {
struct TensorNode;
}

// Dense float64 tensor, rank 1 or 2, row-major. Copies are handles to the
// same node, so a Tensor can sit in an autodiff graph while the caller
// keeps a reference to it as a parameter.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double fill);
  static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values);
  static Tensor scalar(double value);
  // Leaf with requires_grad set; the only way gradients come into being.
  static Tensor parameter(std::vector<std::size_t> shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t rank() const;
  // Rank-2 accessors; a rank-1 tensor reads as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Leaf tensors only: in-place edits would corrupt a recorded graph
  // anywhere else.
  std::span<double> mutable_values();

  double value() const;  // scalar shorthand
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  bool is_leaf() const;

  // Stable identity for gradient lookup.
  const detail::TensorNode* node() const { return node_.get(); }

  // Deep copy with no graph history and no grad flag.
  Tensor detached_copy() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(std::vector<std::size_t> shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(const detail::TensorNode&)> backprop);
  friend class GradientMap;
  friend struct NodeAccess;
};

// Result of backward(): gradient per reachable parameter leaf.
class GradientMap {
 public:
  bool contains(const Tensor& param) const;
  // Throws DataError when the parameter was not reached.
  const Tensor& at(const Tensor& param) const;
  // nullptr when the parameter did not influence the loss.
  const Tensor* find(const Tensor& param) const;
  std::size_t size() const { return grads_.size(); }

  void insert(const detail::TensorNode* key, Tensor grad);

 private:
  std::unordered_map<const detail::TensorNode*, Tensor> grads_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// ---- operations -------------------------------------------------------
// Elementwise ops accept equal shapes or a scalar on either side; no
// other broadcasting exists.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

// Rank-2 x rank-2 product; a rank-1 side is treated as a row (left) or
// column (right) and the result drops that axis.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Normalizes the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Max-subtracted softmax over each row (over the vector for rank 1).
// Throws NumericError when the input contains NaN or Inf.
Tensor softmax_row(const Tensor& logits);

// Cosine similarity of two equal-length vectors; zero norm is an error.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);

// Vector scaled to unit Euclidean norm; zero norm is an error.
Tensor l2_normalize(const Tensor& x);

// Negative log of probs[label], clamped at a 1e-12 probability floor.
// probs must be rank 1 and sum to one within 1e-6.
Tensor cross_entropy(const Tensor& probs, std::size_t label);

Tensor sum(const Tensor& x);
Tensor take_row(const Tensor& x, std::size_t row);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
// Rank-1 vector repeated as n identical rows.
Tensor repeat_row(const Tensor& v, std::size_t n);
// K scalar tensors stacked into one rank-1 tensor.
Tensor stack_scalars(std::span<const Tensor> scalars);

// Reverse-mode sweep from a scalar loss. The graph built by the forward
// pass is consumed per call; run the forward again for another sweep.
GradientMap backward(const Tensor& loss);

// Max over all parameter coordinates of
// |analytic - central difference| / max(1, |analytic|).
// loss_fn must rebuild the forward pass from the live parameter values.
double finite_difference_check(const std::function<Tensor()>& loss_fn,
                               std::span<const Tensor> params, double step);

}  // namespace promptlab
