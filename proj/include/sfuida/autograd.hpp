#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D matrix; batched sequence tensors are
// flattened to rows ordered (batch, time).

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace sfuida::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    grad += g;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Matrix grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread while alive.
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

Var constant(Matrix value);
Var scalar(double v);

// Runs reverse accumulation from a 1x1 loss into every reachable node.
void backward(const Var& loss);

// Elementwise / linear algebra
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_bias(const Var& a, const Var& row);  // row: [1 x cols], broadcast over rows
Var affine(const Var& x, const Var& weight, const Var& bias);  // x W + b
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var divide_by_scalar(const Var& a, const Var& s);  // s: 1x1
Var add_scalar(const Var& a, double c);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
Var row_mean(const Var& a);  // [r x 1]
Var element(const Var& a, Index r, Index c);  // 1x1

// Shape manipulation
Var reshape(const Var& a, Index rows, Index cols);  // row-major reinterpretation
Var gather_rows(const Var& a, std::span<const Index> rows);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);

// Network building blocks
Var normalize_rows(const Var& a, double eps);  // zero mean, unit variance per row

// x: [N x Cin*Sin] (channel-major per row), weight: [Cout x Cin*kernel],
// bias: [1 x Cout]. Output [N x Cout*Sout], Sout = (Sin - kernel)/stride + 1.
Var conv1d(const Var& x, const Var& weight, const Var& bias, int in_channels, int kernel,
           int stride);

// Single-query scaled dot-product attention per batch item. query: [B x d];
// keys/values: [B*t x d] with rows ordered (b, position).
Var last_query_attention(const Var& query, const Var& keys, const Var& values, Index t);

// Squared Euclidean distances between rows: [n x m].
Var pairwise_sqdist(const Var& a, const Var& b);

// sum_r w_r * CE(softmax(logits_r), targets_r) / normalizer. targets rows are
// probability vectors (one-hot for hard labels).
Var softmax_cross_entropy(const Var& logits, const Matrix& targets, std::span<const double> row_weights,
                          double normalizer);

// Non-differentiable helpers
Matrix softmax_rows(const Matrix& logits);

}  // namespace sfuida::ag
