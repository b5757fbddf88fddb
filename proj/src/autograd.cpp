#include "sfuida/autograd.hpp"

#include <cmath>
#include <string>
#include <unordered_set>

#include "sfuida/core.hpp"

namespace sfuida::ag {

namespace {

thread_local bool t_grad_enabled = true;

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

// Builds an output node. Inputs and the backward closure are only retained
// when recording is on and some input needs a gradient.
Var make_op(Matrix value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->inputs.push_back(v.shared());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

Var make_op_span(Matrix value, std::span<const Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->inputs.push_back(v.shared());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

inline bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

Var constant(Matrix value) { return Var(std::move(value), false); }

Var scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

void backward(const Var& loss) {
  require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  return make_op(a.value() * b.value(), {a, b}, [](Node& self) {
    const Matrix& g = self.grad;
    if (wants(self, 0)) self.inputs[0]->accumulate_expr(g * self.inputs[1]->value.transpose());
    if (wants(self, 1)) self.inputs[1]->accumulate_expr(self.inputs[0]->value.transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants(self, 1)) self.inputs[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants(self, 1)) self.inputs[1]->accumulate_expr(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shapes differ");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    if (wants(self, 0)) self.inputs[0]->accumulate_expr(self.grad.cwiseProduct(self.inputs[1]->value));
    if (wants(self, 1)) self.inputs[1]->accumulate_expr(self.grad.cwiseProduct(self.inputs[0]->value));
  });
}

Var scale(const Var& a, double c) {
  return make_op(a.value() * c, {a}, [c](Node& self) { self.inputs[0]->accumulate_expr(self.grad * c); });
}

Var add_scalar(const Var& a, double c) {
  return make_op(a.value().array() + c, {a}, [](Node& self) { self.inputs[0]->accumulate(self.grad); });
}

Var add_bias(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_bias: bias must be [1 x cols]");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_op(std::move(out), {a, row}, [](Node& self) {
    if (wants(self, 0)) self.inputs[0]->accumulate(self.grad);
    if (wants(self, 1)) self.inputs[1]->accumulate_expr(self.grad.colwise().sum());
  });
}

Var affine(const Var& x, const Var& weight, const Var& bias) { return add_bias(matmul(x, weight), bias); }

Var tanh(const Var& a) {
  return make_op(a.value().array().tanh().matrix(), {a}, [](Node& self) {
    self.inputs[0]->accumulate_expr(
        (self.grad.array() * (1.0 - self.value.array().square())).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_op(std::move(out), {a}, [](Node& self) {
    self.inputs[0]->accumulate_expr(
        (self.grad.array() * self.value.array() * (1.0 - self.value.array())).matrix());
  });
}

Var relu(const Var& a) {
  return make_op(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    self.inputs[0]->accumulate_expr(
        (self.grad.array() * (self.inputs[0]->value.array() > 0.0).cast<double>()).matrix());
  });
}

Var exp(const Var& a) {
  return make_op(a.value().array().exp().matrix(), {a}, [](Node& self) {
    self.inputs[0]->accumulate_expr(self.grad.cwiseProduct(self.value));
  });
}

Var divide_by_scalar(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "divide_by_scalar: divisor must be 1x1");
  const double d = s.item();
  return make_op(a.value() / d, {a, s}, [](Node& self) {
    const double d = self.inputs[1]->value(0, 0);
    if (wants(self, 0)) self.inputs[0]->accumulate_expr(self.grad / d);
    if (wants(self, 1)) {
      Matrix g(1, 1);
      g(0, 0) = -(self.grad.cwiseProduct(self.inputs[0]->value)).sum() / (d * d);
      self.inputs[1]->accumulate(g);
    }
  });
}

// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(std::move(out), {a}, [](Node& self) {
    const auto& in = self.inputs[0]->value;
    self.inputs[0]->accumulate_expr(Matrix::Constant(in.rows(), in.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  require(a.value().size() > 0, "mean: empty input");
  Matrix out(1, 1);
  out(0, 0) = a.value().mean();
  return make_op(std::move(out), {a}, [](Node& self) {
    const auto& in = self.inputs[0]->value;
    const double g = self.grad(0, 0) / static_cast<double>(in.size());
    self.inputs[0]->accumulate_expr(Matrix::Constant(in.rows(), in.cols(), g));
  });
}

Var row_mean(const Var& a) {
  require(a.cols() > 0, "row_mean: no columns");
  Matrix out = a.value().rowwise().mean();
  return make_op(std::move(out), {a}, [](Node& self) {
    const auto& in = self.inputs[0]->value;
    Matrix g = self.grad.col(0).replicate(1, in.cols()) / static_cast<double>(in.cols());
    self.inputs[0]->accumulate(g);
  });
}

Var element(const Var& a, Index r, Index c) {
  require(r >= 0 && r < a.rows() && c >= 0 && c < a.cols(), "element: index out of range");
  Matrix out(1, 1);
  out(0, 0) = a.value()(r, c);
  return make_op(std::move(out), {a}, [r, c](Node& self) {
    auto& in = *self.inputs[0];
    if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    in.grad(r, c) += self.grad(0, 0);
  });
}

// ---------------------------------------------------------------------------

Var reshape(const Var& a, Index rows, Index cols) {
  require(rows * cols == a.value().size(), "reshape: element count differs");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make_op(std::move(out), {a}, [](Node& self) {
    const auto& in = self.inputs[0]->value;
    self.inputs[0]->accumulate(Eigen::Map<const Matrix>(self.grad.data(), in.rows(), in.cols()));
  });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {a}, [idx = std::move(idx)](Node& self) {
    auto& in = *self.inputs[0];
    if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) in.grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: range out of bounds");
  Matrix out = a.value().middleCols(start, count);
  return make_op(std::move(out), {a}, [start, count](Node& self) {
    auto& in = *self.inputs[0];
    if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    in.grad.middleCols(start, count) += self.grad;
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts[0].rows(), "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op_span(std::move(out), parts, [](Node& self) {
    Index at = 0;
    for (auto& in : self.inputs) {
      const Index c = in->value.cols();
      if (in->requires_grad) in->accumulate(self.grad.middleCols(at, c));
      at += c;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == parts[0].cols(), "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op_span(std::move(out), parts, [](Node& self) {
    Index at = 0;
    for (auto& in : self.inputs) {
      const Index r = in->value.rows();
      if (in->requires_grad) in->accumulate(self.grad.middleRows(at, r));
      at += r;
    }
  });
}

// ---------------------------------------------------------------------------

Var normalize_rows(const Var& a, double eps) {
  const Matrix& x = a.value();
  const Index n = x.cols();
  require(n > 0, "normalize_rows: no columns");
  Eigen::VectorXd inv_std(x.rows());
  Matrix y(x.rows(), n);
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  return make_op(std::move(y), {a}, [inv_std](Node& self) {
    const Matrix& g = self.grad;
    const Matrix& y = self.value;
    Matrix dx(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const double gm = g.row(r).mean();
      const double gy = g.row(r).dot(y.row(r)) / static_cast<double>(g.cols());
      dx.row(r) = inv_std(r) * (g.row(r).array() - gm - y.row(r).array() * gy);
    }
    self.inputs[0]->accumulate(dx);
  });
}

Var conv1d(const Var& x, const Var& weight, const Var& bias, int in_channels, int kernel, int stride) {
  require(in_channels > 0 && kernel > 0 && stride > 0, "conv1d: bad geometry");
  require(x.cols() % in_channels == 0, "conv1d: input width not divisible by channels");
  const Index s_in = x.cols() / in_channels;
  require(s_in >= kernel, "conv1d: input shorter than kernel");
  require(weight.cols() == in_channels * kernel, "conv1d: weight width != channels*kernel");
  const Index c_out = weight.rows();
  require(bias.rows() == 1 && bias.cols() == c_out, "conv1d: bias must be [1 x Cout]");
  const Index s_out = (s_in - kernel) / stride + 1;
  const Index n = x.rows();
  const Index patch = static_cast<Index>(in_channels) * kernel;

  using ColMajor = Eigen::MatrixXd;
  auto build_patches = [=](const double* row, ColMajor& p) {
    p.resize(s_out, patch);
    for (int ci = 0; ci < in_channels; ++ci) {
      const double* chan = row + ci * s_in;
      for (int j = 0; j < kernel; ++j) {
        const Index col = static_cast<Index>(ci) * kernel + j;
        for (Index pos = 0; pos < s_out; ++pos) p(pos, col) = chan[pos * stride + j];
      }
    }
  };

  Matrix out(n, c_out * s_out);
  {
    ColMajor patches;
    const Eigen::MatrixXd wt = weight.value().transpose();
    const Eigen::RowVectorXd b = bias.value().row(0);
    for (Index item = 0; item < n; ++item) {
      build_patches(x.value().row(item).data(), patches);
      Eigen::Map<ColMajor> y(out.row(item).data(), s_out, c_out);
      y.noalias() = patches * wt;
      y.rowwise() += b;
    }
  }

  return make_op(std::move(out), {x, weight, bias},
                 [=](Node& self) {
                   Node& xn = *self.inputs[0];
                   Node& wn = *self.inputs[1];
                   Node& bn = *self.inputs[2];
                   ColMajor patches;
                   Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(c_out, patch);
                   Eigen::RowVectorXd db = Eigen::RowVectorXd::Zero(c_out);
                   if (xn.requires_grad && xn.grad.size() == 0) {
                     xn.grad = Matrix::Zero(xn.value.rows(), xn.value.cols());
                   }
                   const Eigen::MatrixXd w = wn.value;
                   for (Index item = 0; item < n; ++item) {
                     Eigen::Map<const ColMajor> g(self.grad.row(item).data(), s_out, c_out);
                     if (wn.requires_grad) {
                       build_patches(xn.value.row(item).data(), patches);
                       dw.noalias() += g.transpose() * patches;
                     }
                     if (bn.requires_grad) db += g.colwise().sum();
                     if (xn.requires_grad) {
                       const ColMajor dp = g * w;
                       double* dx = xn.grad.row(item).data();
                       for (int ci = 0; ci < in_channels; ++ci) {
                         double* chan = dx + ci * s_in;
                         for (int j = 0; j < kernel; ++j) {
                           const Index col = static_cast<Index>(ci) * kernel + j;
                           for (Index pos = 0; pos < s_out; ++pos) chan[pos * stride + j] += dp(pos, col);
                         }
                       }
                     }
                   }
                   if (wn.requires_grad) wn.accumulate(dw);
                   if (bn.requires_grad) bn.accumulate(db);
                 });
}

Var last_query_attention(const Var& query, const Var& keys, const Var& values, Index t) {
  const Index b = query.rows();
  const Index d = query.cols();
  require(t >= 1, "attention: empty prefix");
  require(keys.rows() == b * t && values.rows() == b * t, "attention: keys/values rows != B*t");
  require(keys.cols() == d, "attention: key width differs from query");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix weights(b, t);  // attention probabilities
  Matrix out(b, values.cols());
  for (Index i = 0; i < b; ++i) {
    const auto k = keys.value().middleRows(i * t, t);
    Eigen::RowVectorXd s = (k * query.value().row(i).transpose()).transpose() * inv_sqrt_d;
    s.array() -= s.maxCoeff();
    s = s.array().exp();
    s /= s.sum();
    weights.row(i) = s;
    out.row(i) = s * values.value().middleRows(i * t, t);
  }
  return make_op(std::move(out), {query, keys, values}, [=](Node& self) {
    Node& qn = *self.inputs[0];
    Node& kn = *self.inputs[1];
    Node& vn = *self.inputs[2];
    Matrix dq = Matrix::Zero(b, d);
    Matrix dk = Matrix::Zero(b * t, d);
    Matrix dv = Matrix::Zero(b * t, vn.value.cols());
    for (Index i = 0; i < b; ++i) {
      const Eigen::RowVectorXd g = self.grad.row(i);
      const Eigen::RowVectorXd a = weights.row(i);
      const auto v = vn.value.middleRows(i * t, t);
      const auto k = kn.value.middleRows(i * t, t);
      dv.middleRows(i * t, t) = a.transpose() * g;
      const Eigen::RowVectorXd da = (v * g.transpose()).transpose();
      const double dot = a.dot(da);
      const Eigen::RowVectorXd ds = (a.array() * (da.array() - dot)).matrix() * inv_sqrt_d;
      dq.row(i) = ds * k;
      dk.middleRows(i * t, t) = ds.transpose() * qn.value.row(i);
    }
    if (qn.requires_grad) qn.accumulate(dq);
    if (kn.requires_grad) kn.accumulate(dk);
    if (vn.requires_grad) vn.accumulate(dv);
  });
}

Var pairwise_sqdist(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw Error(ErrorCode::DimMismatch, "pairwise_sqdist: widths differ");
  const Matrix& x = a.value();
  const Matrix& y = b.value();
  Matrix d(x.rows(), y.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < y.rows(); ++j) d(i, j) = (x.row(i) - y.row(j)).squaredNorm();
  }
  return make_op(std::move(d), {a, b}, [](Node& self) {
    const Matrix& x = self.inputs[0]->value;
    const Matrix& y = self.inputs[1]->value;
    const Matrix& g = self.grad;
    // d/dx_i = 2 sum_j g_ij (x_i - y_j); d/dy_j = -2 sum_i g_ij (x_i - y_j)
    if (wants(self, 0)) {
      Matrix dx = 2.0 * (g.rowwise().sum().asDiagonal() * x - g * y);
      self.inputs[0]->accumulate(dx);
    }
    if (wants(self, 1)) {
      Matrix dy = 2.0 * (g.colwise().sum().transpose().asDiagonal() * y - g.transpose() * x);
      self.inputs[1]->accumulate(dy);
    }
  });
}

Var softmax_cross_entropy(const Var& logits, const Matrix& targets, std::span<const double> row_weights,
                          double normalizer) {
  require(targets.rows() == logits.rows() && targets.cols() == logits.cols(),
          "softmax_cross_entropy: target shape differs from logits");
  require(static_cast<Index>(row_weights.size()) == logits.rows(),
          "softmax_cross_entropy: one weight per row required");
  require(normalizer > 0.0, "softmax_cross_entropy: normalizer must be positive");
  const Matrix& z = logits.value();
  Matrix log_p(z.rows(), z.cols());
  double total = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    log_p.row(r) = z.row(r).array() - lse;
    if (row_weights[r] != 0.0) total -= row_weights[r] * targets.row(r).dot(log_p.row(r));
  }
  Matrix out(1, 1);
  out(0, 0) = total / normalizer;
  std::vector<double> w(row_weights.begin(), row_weights.end());
  return make_op(std::move(out), {logits}, [log_p, targets, w = std::move(w), normalizer](Node& self) {
    const double g = self.grad(0, 0) / normalizer;
    Matrix dz(log_p.rows(), log_p.cols());
    for (Index r = 0; r < log_p.rows(); ++r) {
      const double mass = targets.row(r).sum();
      dz.row(r) = w[r] * g * (log_p.row(r).array().exp() * mass - targets.row(r).array());
    }
    self.inputs[0]->accumulate(dz);
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace sfuida::ag
