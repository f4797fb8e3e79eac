#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "error.hpp"

namespace sao::ad {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;

  int64_t size() const { return static_cast<int64_t>(val.size()); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

/// Handle to a node in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<double> values);
  static Var scalar(double v) { return constant({}, {v}); }
  /// Leaf that participates in differentiation.
  static Var leaf(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return node_->size(); }
  const std::vector<double>& value() const { return node_->val; }
  std::vector<double>& mutable_value() { return node_->val; }
  const std::vector<double>& grad() const;
  bool needs_grad() const { return node_->needs_grad; }
  double item() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// -- elementwise / broadcast ------------------------------------------------
// add/sub/mul accept equal shapes, a scalar on either side, or a trailing-axis
// row vector against a higher-rank tensor.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sqrt_eps(const Var& a, double eps = 1e-8);
Var sigmoid(const Var& a);

// -- linear algebra ---------------------------------------------------------
Var matmul(const Var& a, const Var& b);           // (M,K) x (K,N)
Var matmul_nt(const Var& a, const Var& b);        // (M,K) x (N,K)^T -> (M,N)
Var linear(const Var& x, const Var& w, const Var& b);  // x*w + row bias

// -- shape / indexing -------------------------------------------------------
Var reshape(const Var& a, Shape shape);
Var concat_lastdim(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, int64_t start, int64_t len);
Var gather_rows(const Var& a, const std::vector<int64_t>& rows);
/// Adds `row` (shape d) to the listed rows of `a` (shape N x d).
Var add_to_rows(const Var& a, const Var& row, const std::vector<int64_t>& rows);
/// nodes (N,d) -> (N*N, 2d) with out[i*N+j] = concat(nodes[i], nodes[j]).
Var pair_concat(const Var& nodes);
/// a, b (N,d) -> (N*N, d) with out[i*N+j] = a[i] + b[j].
Var outer_row_add(const Var& a, const Var& b);
Var mean_rows(const Var& a);  // (N,d) -> (d)

// -- reductions / normalizations -------------------------------------------
Var reduce_sum(const Var& a);               // all elements -> scalar
Var reduce_mean(const Var& a);              // all elements -> scalar
Var reduce_sum_lastdim(const Var& a);       // (..., d) -> (...)
Var softmax_lastdim(const Var& a);
Var layer_norm_lastdim(const Var& a, double eps = 1e-5);
Var l2_normalize_lastdim(const Var& a, double eps = 1e-8);

// -- task-specific ----------------------------------------------------------
/// Gaussian densities of affine-transformed inputs: out[m, k] = G(x[m]; mu[k], sigma[k]).
Var gaussian_density(const Var& x, const Var& mu, const Var& sigma);
/// Per-row cross entropy of logits (N, C) against integer targets.
Var cross_entropy_logits(const Var& logits, const std::vector<int64_t>& targets);
/// Per-element binary cross entropy with logits; labels in {0, 1}.
Var bce_with_logits(const Var& logits, const std::vector<double>& labels);

// -- batched 3x3 geometry (rows hold row-major 3x3 matrices) ----------------
/// Axis-angle rows (N,3) -> rotation matrices (N,9), Rodrigues map.
Var rodrigues_rows(const Var& v);
Var rows_matmul(const Var& a, const Var& b);             // (N,9) x (N,9)
Var rows_rotate(const Var& r, const Var& x);             // (N,9) applied to (N,3)
/// Local coordinates of every point in every frame:
/// out[(i*M + m), :] = R_i^T (X_m - t_i), for R (N,9), t (N,3), X (M,3).
Var to_local_frames(const Var& r, const Var& t, const Var& x);

Var stop_gradient(const Var& a);

/// Reverse-mode sweep from a scalar loss; accumulates into node grads.
void backward(const Var& loss);

struct ParameterStore {
  std::map<std::string, Var> params;

  Var& at(const std::string& path);
  const Var& at(const std::string& path) const;
  void add(const std::string& path, Var v);
  bool contains(const std::string& path) const {
    return params.count(path) > 0;
  }
};

using GradientMap = std::map<std::string, std::vector<double>>;

/// Clears accumulated gradients on every parameter leaf.
void zero_gradients(ParameterStore& store);

/// Collects accumulated gradients for every parameter (zeros when untouched).
GradientMap collect_gradients(const ParameterStore& store);

/// Central-difference check of f against reverse mode over the given leaves.
/// Returns the max relative error, denominator max(|a|, |b|, 1e-8).
double grad_check(const std::function<Var(const std::vector<Var>&)>& f,
                  std::vector<Var> inputs, double h = 1e-5);

}  // namespace sao::ad
