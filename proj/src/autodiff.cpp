#include "autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace sao::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

constexpr double kInvSqrt2Pi = 0.3989422804014327;

void check_finite(const std::vector<double>& v, const char* op) {
  // Vectorizable screen: a sum of absolute values is finite exactly when all
  // elements are finite (barring overflow of the sum itself, which the exact
  // per-element pass below rules out).
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  if (std::isfinite(s)) return;
  for (double x : v)
    if (!std::isfinite(x))
      fail(ErrorCode::NonFiniteValue, std::string("non-finite value produced by ") + op);
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> val,
                                std::vector<std::shared_ptr<Node>> inputs,
                                std::function<void(Node&)> bp, const char* op) {
  if (shape_size(shape) != static_cast<int64_t>(val.size()))
    fail(ErrorCode::ShapeMismatch,
         std::string(op) + ": shape " + shape_str(shape) + " vs " +
             std::to_string(val.size()) + " values");
  check_finite(val, op);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  for (auto& in : inputs)
    if (in->needs_grad) n->needs_grad = true;
  if (n->needs_grad) {
    n->inputs = std::move(inputs);
    n->backprop = std::move(bp);
  }
  return n;
}

int64_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

int64_t rows_of(const Shape& s) {
  int64_t r = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return s.empty() ? 1 : r;
}

void require_matrix(const Var& a, const char* op) {
  if (a.shape().size() != 2)
    fail(ErrorCode::ShapeMismatch, std::string(op) + ": expected rank-2, got " +
                                       shape_str(a.shape()));
}

enum class Bcast { Same, ScalarRight, ScalarLeft, RowRight, RowLeft };

Bcast broadcast_kind(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.size() == 1) return Bcast::ScalarRight;
  if (a.size() == 1) return Bcast::ScalarLeft;
  if (b.shape().size() == 1 && last_dim(a.shape()) == b.size() &&
      a.shape().size() > 1)
    return Bcast::RowRight;
  if (a.shape().size() == 1 && last_dim(b.shape()) == a.size() &&
      b.shape().size() > 1)
    return Bcast::RowLeft;
  fail(ErrorCode::ShapeMismatch, std::string(op) + ": incompatible shapes " +
                                     shape_str(a.shape()) + " and " +
                                     shape_str(b.shape()));
}

// Generic elementwise binary op with limited broadcasting.
template <class F, class DA, class DB>
Var binary_op(const Var& a, const Var& b, F f, DA da, DB db, const char* op) {
  Bcast kind = broadcast_kind(a, b, op);
  const auto& av = a.value();
  const auto& bv = b.value();
  Shape out_shape = (kind == Bcast::ScalarLeft || kind == Bcast::RowLeft)
                        ? b.shape()
                        : a.shape();
  int64_t n = shape_size(out_shape);
  int64_t d = (kind == Bcast::RowRight)   ? b.size()
              : (kind == Bcast::RowLeft)  ? a.size()
                                          : 0;
  std::vector<double> out(n);
  // Tight loop per broadcast kind; the Row kinds avoid per-element modulo.
  switch (kind) {
    case Bcast::Same:
      for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
      break;
    case Bcast::ScalarRight:
      for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[0]);
      break;
    case Bcast::ScalarLeft:
      for (int64_t i = 0; i < n; ++i) out[i] = f(av[0], bv[i]);
      break;
    case Bcast::RowRight:
      for (int64_t r = 0; r < n / d; ++r)
        for (int64_t c = 0; c < d; ++c) out[r * d + c] = f(av[r * d + c], bv[c]);
      break;
    case Bcast::RowLeft:
      for (int64_t r = 0; r < n / d; ++r)
        for (int64_t c = 0; c < d; ++c) out[r * d + c] = f(av[c], bv[r * d + c]);
      break;
  }
  auto an = a.node();
  auto bn = b.node();
  auto bp = [an, bn, kind, d, da, db](Node& self) {
    const int64_t n = self.size();
    const double* g = self.grad.data();
    if (an->needs_grad) {
      an->ensure_grad();
      const double* x = an->val.data();
      const double* y = bn->val.data();
      double* ga = an->grad.data();
      switch (kind) {
        case Bcast::Same:
          for (int64_t i = 0; i < n; ++i) ga[i] += da(x[i], y[i]) * g[i];
          break;
        case Bcast::ScalarRight:
          for (int64_t i = 0; i < n; ++i) ga[i] += da(x[i], y[0]) * g[i];
          break;
        case Bcast::ScalarLeft:
          for (int64_t i = 0; i < n; ++i) ga[0] += da(x[0], y[i]) * g[i];
          break;
        case Bcast::RowRight:
          for (int64_t r = 0; r < n / d; ++r)
            for (int64_t c = 0; c < d; ++c)
              ga[r * d + c] += da(x[r * d + c], y[c]) * g[r * d + c];
          break;
        case Bcast::RowLeft:
          for (int64_t r = 0; r < n / d; ++r)
            for (int64_t c = 0; c < d; ++c)
              ga[c] += da(x[c], y[r * d + c]) * g[r * d + c];
          break;
      }
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      const double* x = an->val.data();
      const double* y = bn->val.data();
      double* gb = bn->grad.data();
      switch (kind) {
        case Bcast::Same:
          for (int64_t i = 0; i < n; ++i) gb[i] += db(x[i], y[i]) * g[i];
          break;
        case Bcast::ScalarRight:
          for (int64_t i = 0; i < n; ++i) gb[0] += db(x[i], y[0]) * g[i];
          break;
        case Bcast::ScalarLeft:
          for (int64_t i = 0; i < n; ++i) gb[i] += db(x[0], y[i]) * g[i];
          break;
        case Bcast::RowRight:
          for (int64_t r = 0; r < n / d; ++r)
            for (int64_t c = 0; c < d; ++c)
              gb[c] += db(x[r * d + c], y[c]) * g[r * d + c];
          break;
        case Bcast::RowLeft:
          for (int64_t r = 0; r < n / d; ++r)
            for (int64_t c = 0; c < d; ++c)
              gb[r * d + c] += db(x[c], y[r * d + c]) * g[r * d + c];
          break;
      }
    }
  };
  return Var(make_node(std::move(out_shape), std::move(out), {an, bn}, bp, op));
}

// Generic elementwise unary op.
template <class F, class DF>
Var unary_op(const Var& a, F f, DF df, const char* op) {
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  auto bp = [an, df](Node& self) {
    an->ensure_grad();
    for (int64_t i = 0; i < self.size(); ++i)
      an->grad[i] += df(an->val[i], self.val[i]) * self.grad[i];
  };
  return Var(make_node(a.shape(), std::move(out), {an}, bp, op));
}

}  // namespace

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

Var Var::constant(Shape shape, std::vector<double> values) {
  return Var(make_node(std::move(shape), std::move(values), {}, nullptr, "constant"));
}

Var Var::leaf(Shape shape, std::vector<double> values) {
  auto n = make_node(std::move(shape), std::move(values), {}, nullptr, "leaf");
  n->needs_grad = true;
  return Var(n);
}

const std::vector<double>& Var::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

double Var::item() const {
  if (size() != 1) fail(ErrorCode::NotScalar, "item() on non-scalar " + shape_str(shape()));
  return node_->val[0];
}

Var add(const Var& a, const Var& b) {
  return binary_op(a, b, [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; },
                   [](double, double) { return 1.0; }, "add");
}

Var sub(const Var& a, const Var& b) {
  return binary_op(a, b, [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; },
                   [](double, double) { return -1.0; }, "sub");
}

Var mul(const Var& a, const Var& b) {
  return binary_op(a, b, [](double x, double y) { return x * y; },
                   [](double, double y) { return y; },
                   [](double x, double) { return x; }, "mul");
}

Var scale(const Var& a, double s) {
  return unary_op(a, [s](double x) { return x * s; },
                  [s](double, double) { return s; }, "scale");
}

Var add_scalar(const Var& a, double s) {
  return unary_op(a, [s](double x) { return x + s; },
                  [](double, double) { return 1.0; }, "add_scalar");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; }, "relu");
}

Var gelu(const Var& a) {
  return unary_op(a,
                  [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
                  [](double x, double) {
                    double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    return phi + x * pdf;
                  },
                  "gelu");
}

Var exp(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; }, "exp");
}

Var log(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; }, "log");
}

Var square(const Var& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; }, "square");
}

Var sqrt_eps(const Var& a, double eps) {
  return unary_op(a, [eps](double x) { return std::sqrt(x + eps); },
                  [](double, double y) { return 0.5 / y; }, "sqrt_eps");
}

Var sigmoid(const Var& a) {
  return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    fail(ErrorCode::ShapeMismatch, "matmul: " + shape_str(a.shape()) + " x " +
                                       shape_str(b.shape()));
  std::vector<double> out(m * n);
  CMap am(a.value().data(), m, k), bm(b.value().data(), k, n);
  MMap(out.data(), m, n).noalias() = am * bm;
  auto an = a.node();
  auto bn = b.node();
  auto bp = [an, bn, m, k, n](Node& self) {
    CMap g(self.grad.data(), m, n);
    if (an->needs_grad) {
      an->ensure_grad();
      CMap bm(bn->val.data(), k, n);
      MMap(an->grad.data(), m, k).noalias() += g * bm.transpose();
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      CMap am(an->val.data(), m, k);
      MMap(bn->grad.data(), k, n).noalias() += am.transpose() * g;
    }
  };
  return Var(make_node({m, n}, std::move(out), {an, bn}, bp, "matmul"));
}

Var matmul_nt(const Var& a, const Var& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (k != b.shape()[1])
    fail(ErrorCode::ShapeMismatch, "matmul_nt: " + shape_str(a.shape()) + " x " +
                                       shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  CMap am(a.value().data(), m, k), bm(b.value().data(), n, k);
  MMap(out.data(), m, n).noalias() = am * bm.transpose();
  auto an = a.node();
  auto bn = b.node();
  auto bp = [an, bn, m, k, n](Node& self) {
    CMap g(self.grad.data(), m, n);
    if (an->needs_grad) {
      an->ensure_grad();
      CMap bm(bn->val.data(), n, k);
      MMap(an->grad.data(), m, k).noalias() += g * bm;
    }
    if (bn->needs_grad) {
      bn->ensure_grad();
      CMap am(an->val.data(), m, k);
      MMap(bn->grad.data(), n, k).noalias() += g.transpose() * am;
    }
  };
  return Var(make_node({m, n}, std::move(out), {an, bn}, bp, "matmul_nt"));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  return add(matmul(x, w), b);
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.size())
    fail(ErrorCode::ShapeMismatch, "reshape: " + shape_str(a.shape()) + " to " +
                                       shape_str(shape));
  auto an = a.node();
  auto bp = [an](Node& self) {
    an->ensure_grad();
    for (int64_t i = 0; i < self.size(); ++i) an->grad[i] += self.grad[i];
  };
  return Var(make_node(std::move(shape), a.value(), {an}, bp, "reshape"));
}

Var concat_lastdim(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat: no inputs");
  int64_t rows = rows_of(parts[0].shape());
  int64_t total = 0;
  for (const auto& p : parts) {
    if (rows_of(p.shape()) != rows)
      fail(ErrorCode::ShapeMismatch, "concat: row counts differ");
    total += last_dim(p.shape());
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = total;
  std::vector<double> out(rows * total);
  std::vector<std::shared_ptr<Node>> ins;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    ins.push_back(p.node());
    widths.push_back(last_dim(p.shape()));
  }
  int64_t off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].value();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(v.begin() + r * widths[pi], v.begin() + (r + 1) * widths[pi],
                out.begin() + r * total + off);
    off += widths[pi];
  }
  auto bp = [ins, widths, rows, total](Node& self) {
    int64_t off = 0;
    for (size_t pi = 0; pi < ins.size(); ++pi) {
      if (ins[pi]->needs_grad) {
        ins[pi]->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < widths[pi]; ++c)
            ins[pi]->grad[r * widths[pi] + c] += self.grad[r * total + off + c];
      }
      off += widths[pi];
    }
  };
  return Var(make_node(std::move(out_shape), std::move(out), std::move(ins), bp,
                       "concat_lastdim"));
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat_rows: no inputs");
  int64_t d = last_dim(parts[0].shape());
  int64_t rows = 0;
  std::vector<std::shared_ptr<Node>> ins;
  std::vector<int64_t> counts;
  for (const auto& p : parts) {
    if (last_dim(p.shape()) != d)
      fail(ErrorCode::ShapeMismatch, "concat_rows: widths differ");
    ins.push_back(p.node());
    counts.push_back(rows_of(p.shape()));
    rows += counts.back();
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts)
    out.insert(out.end(), p.value().begin(), p.value().end());
  auto bp = [ins, counts, d](Node& self) {
    int64_t off = 0;
    for (size_t pi = 0; pi < ins.size(); ++pi) {
      int64_t n = counts[pi] * d;
      if (ins[pi]->needs_grad) {
        ins[pi]->ensure_grad();
        for (int64_t i = 0; i < n; ++i) ins[pi]->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  };
  return Var(make_node({rows, d}, std::move(out), std::move(ins), bp, "concat_rows"));
}

Var slice_cols(const Var& a, int64_t start, int64_t len) {
  require_matrix(a, "slice_cols");
  int64_t rows = a.shape()[0], cols = a.shape()[1];
  if (start < 0 || len <= 0 || start + len > cols)
    fail(ErrorCode::ShapeMismatch, "slice_cols: range out of bounds");
  std::vector<double> out(rows * len);
  const auto& v = a.value();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(v.begin() + r * cols + start, v.begin() + r * cols + start + len,
              out.begin() + r * len);
  auto an = a.node();
  auto bp = [an, rows, cols, start, len](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < len; ++c)
        an->grad[r * cols + start + c] += self.grad[r * len + c];
  };
  return Var(make_node({rows, len}, std::move(out), {an}, bp, "slice_cols"));
}

Var gather_rows(const Var& a, const std::vector<int64_t>& rows) {
  int64_t n = rows_of(a.shape()), d = last_dim(a.shape());
  bool vector_input = a.shape().size() == 1;
  if (vector_input) {
    n = a.size();
    d = 1;
  }
  std::vector<double> out(rows.size() * d);
  const auto& v = a.value();
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n)
      fail(ErrorCode::ShapeMismatch, "gather_rows: index out of range");
    std::copy(v.begin() + rows[i] * d, v.begin() + (rows[i] + 1) * d,
              out.begin() + i * d);
  }
  Shape out_shape = vector_input
                        ? Shape{static_cast<int64_t>(rows.size())}
                        : Shape{static_cast<int64_t>(rows.size()), d};
  auto an = a.node();
  auto bp = [an, rows, d](Node& self) {
    an->ensure_grad();
    for (size_t i = 0; i < rows.size(); ++i)
      for (int64_t c = 0; c < d; ++c)
        an->grad[rows[i] * d + c] += self.grad[i * d + c];
  };
  return Var(make_node(std::move(out_shape), std::move(out), {an}, bp, "gather_rows"));
}

Var add_to_rows(const Var& a, const Var& row, const std::vector<int64_t>& rows) {
  require_matrix(a, "add_to_rows");
  int64_t n = a.shape()[0], d = a.shape()[1];
  if (row.size() != d)
    fail(ErrorCode::ShapeMismatch, "add_to_rows: row width mismatch");
  std::vector<double> out = a.value();
  const auto& rv = row.value();
  for (int64_t r : rows) {
    if (r < 0 || r >= n) fail(ErrorCode::MaskOutOfRange, "add_to_rows: row out of range");
    for (int64_t c = 0; c < d; ++c) out[r * d + c] += rv[c];
  }
  auto an = a.node();
  auto rn = row.node();
  auto bp = [an, rn, rows, d](Node& self) {
    if (an->needs_grad) {
      an->ensure_grad();
      for (int64_t i = 0; i < self.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (rn->needs_grad) {
      rn->ensure_grad();
      for (int64_t r : rows)
        for (int64_t c = 0; c < d; ++c) rn->grad[c] += self.grad[r * d + c];
    }
  };
  return Var(make_node(a.shape(), std::move(out), {an, rn}, bp, "add_to_rows"));
}

Var pair_concat(const Var& nodes) {
  require_matrix(nodes, "pair_concat");
  int64_t n = nodes.shape()[0], d = nodes.shape()[1];
  std::vector<double> out(n * n * 2 * d);
  const auto& v = nodes.value();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double* dst = out.data() + (i * n + j) * 2 * d;
      std::copy(v.begin() + i * d, v.begin() + (i + 1) * d, dst);
      std::copy(v.begin() + j * d, v.begin() + (j + 1) * d, dst + d);
    }
  auto an = nodes.node();
  auto bp = [an, n, d](Node& self) {
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        const double* g = self.grad.data() + (i * n + j) * 2 * d;
        for (int64_t c = 0; c < d; ++c) {
          an->grad[i * d + c] += g[c];
          an->grad[j * d + c] += g[d + c];
        }
      }
  };
  return Var(make_node({n * n, 2 * d}, std::move(out), {an}, bp, "pair_concat"));
}

Var outer_row_add(const Var& a, const Var& b) {
  require_matrix(a, "outer_row_add");
  if (a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, "outer_row_add: shapes " + shape_str(a.shape()) +
                                       " and " + shape_str(b.shape()));
  int64_t n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(n * n * d);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double* dst = out.data() + (i * n + j) * d;
      const double* x = av.data() + i * d;
      const double* y = bv.data() + j * d;
      for (int64_t c = 0; c < d; ++c) dst[c] = x[c] + y[c];
    }
  auto an = a.node();
  auto bn = b.node();
  auto bp = [an, bn, n, d](Node& self) {
    if (an->needs_grad) an->ensure_grad();
    if (bn->needs_grad) bn->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        const double* g = self.grad.data() + (i * n + j) * d;
        if (an->needs_grad) {
          double* ga = an->grad.data() + i * d;
          for (int64_t c = 0; c < d; ++c) ga[c] += g[c];
        }
        if (bn->needs_grad) {
          double* gb = bn->grad.data() + j * d;
          for (int64_t c = 0; c < d; ++c) gb[c] += g[c];
        }
      }
  };
  return Var(make_node({n * n, d}, std::move(out), {an, bn}, bp, "outer_row_add"));
}

Var mean_rows(const Var& a) {
  require_matrix(a, "mean_rows");
  int64_t n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(d, 0.0);
  const auto& v = a.value();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out[c] += v[r * d + c];
  for (int64_t c = 0; c < d; ++c) out[c] /= n;
  auto an = a.node();
  auto bp = [an, n, d](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < d; ++c) an->grad[r * d + c] += self.grad[c] / n;
  };
  return Var(make_node({d}, std::move(out), {an}, bp, "mean_rows"));
}

Var reduce_sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  auto an = a.node();
  auto bp = [an](Node& self) {
    an->ensure_grad();
    for (auto& g : an->grad) g += self.grad[0];
  };
  return Var(make_node({}, {s}, {an}, bp, "reduce_sum"));
}

Var reduce_mean(const Var& a) {
  int64_t n = a.size();
  double s = 0.0;
  for (double x : a.value()) s += x;
  auto an = a.node();
  auto bp = [an, n](Node& self) {
    an->ensure_grad();
    for (auto& g : an->grad) g += self.grad[0] / n;
  };
  return Var(make_node({}, {s / n}, {an}, bp, "reduce_mean"));
}

Var reduce_sum_lastdim(const Var& a) {
  int64_t d = last_dim(a.shape());
  int64_t rows = a.size() / d;
  std::vector<double> out(rows, 0.0);
  const auto& v = a.value();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c) out[r] += v[r * d + c];
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {};
  auto an = a.node();
  auto bp = [an, rows, d](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < d; ++c) an->grad[r * d + c] += self.grad[r];
  };
  return Var(make_node(std::move(out_shape), std::move(out), {an}, bp,
                       "reduce_sum_lastdim"));
}

Var softmax_lastdim(const Var& a) {
  int64_t d = last_dim(a.shape());
  int64_t rows = a.size() / d;
  std::vector<double> out(a.size());
  const auto& v = a.value();
  for (int64_t r = 0; r < rows; ++r) {
    double mx = v[r * d];
    for (int64_t c = 1; c < d; ++c) mx = std::max(mx, v[r * d + c]);
    double s = 0.0;
    for (int64_t c = 0; c < d; ++c) s += std::exp(v[r * d + c] - mx);
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = std::exp(v[r * d + c] - mx) / s;
  }
  auto an = a.node();
  auto bp = [an, rows, d](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t c = 0; c < d; ++c)
        dot += self.grad[r * d + c] * self.val[r * d + c];
      for (int64_t c = 0; c < d; ++c)
        an->grad[r * d + c] +=
            self.val[r * d + c] * (self.grad[r * d + c] - dot);
    }
  };
  return Var(make_node(a.shape(), std::move(out), {an}, bp, "softmax"));
}

Var layer_norm_lastdim(const Var& a, double eps) {
  int64_t d = last_dim(a.shape());
  int64_t rows = a.size() / d;
  std::vector<double> out(a.size());
  std::vector<double> inv_std(rows);
  const auto& v = a.value();
  for (int64_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int64_t c = 0; c < d; ++c) mu += v[r * d + c];
    mu /= d;
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      double t = v[r * d + c] - mu;
      var += t * t;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = (v[r * d + c] - mu) * is;
  }
  auto an = a.node();
  auto bp = [an, rows, d, inv_std](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      double mean_g = 0.0, mean_gy = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        mean_g += self.grad[r * d + c];
        mean_gy += self.grad[r * d + c] * self.val[r * d + c];
      }
      mean_g /= d;
      mean_gy /= d;
      for (int64_t c = 0; c < d; ++c)
        an->grad[r * d + c] += inv_std[r] * (self.grad[r * d + c] - mean_g -
                                             self.val[r * d + c] * mean_gy);
    }
  };
  return Var(make_node(a.shape(), std::move(out), {an}, bp, "layer_norm"));
}

Var l2_normalize_lastdim(const Var& a, double eps) {
  int64_t d = last_dim(a.shape());
  int64_t rows = a.size() / d;
  std::vector<double> out(a.size());
  std::vector<double> norms(rows);
  const auto& v = a.value();
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < d; ++c) s += v[r * d + c] * v[r * d + c];
    double n = std::sqrt(s + eps * eps);
    norms[r] = n;
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = v[r * d + c] / n;
  }
  auto an = a.node();
  auto bp = [an, rows, d, norms](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t c = 0; c < d; ++c)
        dot += self.grad[r * d + c] * self.val[r * d + c];
      for (int64_t c = 0; c < d; ++c)
        an->grad[r * d + c] +=
            (self.grad[r * d + c] - self.val[r * d + c] * dot) / norms[r];
    }
  };
  return Var(make_node(a.shape(), std::move(out), {an}, bp, "l2_normalize"));
}

Var gaussian_density(const Var& x, const Var& mu, const Var& sigma) {
  if (mu.size() != sigma.size())
    fail(ErrorCode::ShapeMismatch, "gaussian_density: mu/sigma sizes differ");
  int64_t m = x.size(), k = mu.size();
  std::vector<double> out(m * k);
  const auto& xv = x.value();
  const auto& mv = mu.value();
  const auto& sv = sigma.value();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < k; ++j) {
      double z = (xv[i] - mv[j]) / sv[j];
      out[i * k + j] = kInvSqrt2Pi / sv[j] * std::exp(-0.5 * z * z);
    }
  auto xn = x.node();
  auto mn = mu.node();
  auto sn = sigma.node();
  auto bp = [xn, mn, sn, m, k](Node& self) {
    if (xn->needs_grad) xn->ensure_grad();
    if (mn->needs_grad) mn->ensure_grad();
    if (sn->needs_grad) sn->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < k; ++j) {
        double s = sn->val[j];
        double diff = xn->val[i] - mn->val[j];
        double g = self.val[i * k + j];
        double go = self.grad[i * k + j];
        double dgdx = -diff / (s * s) * g;
        if (xn->needs_grad) xn->grad[i] += dgdx * go;
        if (mn->needs_grad) mn->grad[j] += -dgdx * go;
        if (sn->needs_grad)
          sn->grad[j] += g * (diff * diff / (s * s * s) - 1.0 / s) * go;
      }
  };
  Shape out_shape = {m, k};
  return Var(make_node(std::move(out_shape), std::move(out), {xn, mn, sn}, bp,
                       "gaussian_density"));
}

Var cross_entropy_logits(const Var& logits, const std::vector<int64_t>& targets) {
  require_matrix(logits, "cross_entropy_logits");
  int64_t n = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != n)
    fail(ErrorCode::ShapeMismatch, "cross_entropy_logits: target count mismatch");
  const auto& v = logits.value();
  std::vector<double> out(n);
  for (int64_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || targets[r] >= c)
      fail(ErrorCode::ShapeMismatch, "cross_entropy_logits: target out of range");
    double mx = v[r * c];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, v[r * c + j]);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(v[r * c + j] - mx);
    out[r] = std::log(s) + mx - v[r * c + targets[r]];
  }
  auto an = logits.node();
  auto bp = [an, targets, n, c](Node& self) {
    an->ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      double mx = an->val[r * c];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, an->val[r * c + j]);
      double s = 0.0;
      for (int64_t j = 0; j < c; ++j) s += std::exp(an->val[r * c + j] - mx);
      for (int64_t j = 0; j < c; ++j) {
        double p = std::exp(an->val[r * c + j] - mx) / s;
        an->grad[r * c + j] +=
            (p - (j == targets[r] ? 1.0 : 0.0)) * self.grad[r];
      }
    }
  };
  return Var(make_node({n}, std::move(out), {an}, bp, "cross_entropy_logits"));
}

Var bce_with_logits(const Var& logits, const std::vector<double>& labels) {
  int64_t n = logits.size();
  if (static_cast<int64_t>(labels.size()) != n)
    fail(ErrorCode::LengthMismatch, "bce_with_logits: label count mismatch");
  const auto& v = logits.value();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) {
    double x = v[i];
    out[i] = std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  auto an = logits.node();
  auto bp = [an, labels, n](Node& self) {
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      double s = 1.0 / (1.0 + std::exp(-an->val[i]));
      an->grad[i] += (s - labels[i]) * self.grad[i];
    }
  };
  return Var(make_node(logits.shape(), std::move(out), {an}, bp, "bce_with_logits"));
}

namespace {

inline void skew3(const double v[3], double out[9]) {
  out[0] = 0;     out[1] = -v[2]; out[2] = v[1];
  out[3] = v[2];  out[4] = 0;     out[5] = -v[0];
  out[6] = -v[1]; out[7] = v[0];  out[8] = 0;
}

}  // namespace

Var rodrigues_rows(const Var& v) {
  if (v.shape().size() != 2 || v.shape()[1] != 3)
    fail(ErrorCode::ShapeMismatch, "rodrigues_rows: expected (N,3)");
  int64_t n = v.shape()[0];
  std::vector<double> out(n * 9);
  const auto& vv = v.value();
  for (int64_t i = 0; i < n; ++i) {
    double wx = vv[i * 3], wy = vv[i * 3 + 1], wz = vv[i * 3 + 2];
    double theta = std::sqrt(wx * wx + wy * wy + wz * wz);
    double a, b;
    if (theta < 1e-8) {
      double t2 = theta * theta;
      a = 1.0 - t2 / 6.0;
      b = 0.5 - t2 / 24.0;
    } else {
      a = std::sin(theta) / theta;
      b = (1.0 - std::cos(theta)) / (theta * theta);
    }
    double* r = out.data() + i * 9;
    r[0] = 1 - b * (wy * wy + wz * wz);
    r[1] = -a * wz + b * wx * wy;
    r[2] = a * wy + b * wx * wz;
    r[3] = a * wz + b * wx * wy;
    r[4] = 1 - b * (wx * wx + wz * wz);
    r[5] = -a * wx + b * wy * wz;
    r[6] = -a * wy + b * wx * wz;
    r[7] = a * wx + b * wy * wz;
    r[8] = 1 - b * (wx * wx + wy * wy);
  }
  auto an = v.node();
  auto bp = [an, n](Node& self) {
    an->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const double* g = self.grad.data() + i * 9;
      const double* r = self.val.data() + i * 9;
      const double* w = an->val.data() + i * 3;
      double theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
      if (theta2 < 1e-16) {
        // dR/dv_k at the identity is the elementary skew generator.
        an->grad[i * 3 + 0] += g[7] - g[5];
        an->grad[i * 3 + 1] += g[2] - g[6];
        an->grad[i * 3 + 2] += g[3] - g[1];
        continue;
      }
      double vs[9];
      skew3(w, vs);
      for (int k = 0; k < 3; ++k) {
        // Gallego & Yezzi: dR/dv_k = (v_k [v]x + [v x (I - R) e_k]x) / |v|^2 * R
        double col[3] = {-r[k], -r[3 + k], -r[6 + k]};
        col[k] += 1.0;  // (I - R) e_k
        double cr[3] = {w[1] * col[2] - w[2] * col[1],
                        w[2] * col[0] - w[0] * col[2],
                        w[0] * col[1] - w[1] * col[0]};
        double crs[9];
        skew3(cr, crs);
        double m[9];
        for (int t = 0; t < 9; ++t) m[t] = (w[k] * vs[t] + crs[t]) / theta2;
        // dRdvk = m * R; accumulate <g, m*R>.
        double acc = 0.0;
        for (int a2 = 0; a2 < 3; ++a2)
          for (int b2 = 0; b2 < 3; ++b2) {
            double e = 0.0;
            for (int c2 = 0; c2 < 3; ++c2) e += m[a2 * 3 + c2] * r[c2 * 3 + b2];
            acc += g[a2 * 3 + b2] * e;
          }
        an->grad[i * 3 + k] += acc;
      }
    }
  };
  return Var(make_node({n, 9}, std::move(out), {an}, bp, "rodrigues_rows"));
}

Var rows_matmul(const Var& a, const Var& b) {
  if (a.shape() != b.shape() || a.shape().size() != 2 || a.shape()[1] != 9)
    fail(ErrorCode::ShapeMismatch, "rows_matmul: expected matching (N,9)");
  int64_t n = a.shape()[0];
  std::vector<double> out(n * 9);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int64_t i = 0; i < n; ++i) {
    const double* x = av.data() + i * 9;
    const double* y = bv.data() + i * 9;
    double* z = out.data() + i * 9;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        z[r * 3 + c] = x[r * 3] * y[c] + x[r * 3 + 1] * y[3 + c] +
                       x[r * 3 + 2] * y[6 + c];
  }
  auto an = a.node();
  auto bn = b.node();
  auto bp = [an, bn, n](Node& self) {
    for (int64_t i = 0; i < n; ++i) {
      const double* g = self.grad.data() + i * 9;
      if (an->needs_grad) {
        an->ensure_grad();
        const double* y = bn->val.data() + i * 9;
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c)
            an->grad[i * 9 + r * 3 + c] += g[r * 3] * y[c * 3] +
                                           g[r * 3 + 1] * y[c * 3 + 1] +
                                           g[r * 3 + 2] * y[c * 3 + 2];
      }
      if (bn->needs_grad) {
        bn->ensure_grad();
        const double* x = an->val.data() + i * 9;
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c)
            bn->grad[i * 9 + r * 3 + c] += x[r] * g[c] + x[3 + r] * g[3 + c] +
                                           x[6 + r] * g[6 + c];
      }
    }
  };
  return Var(make_node({n, 9}, std::move(out), {an, bn}, bp, "rows_matmul"));
}

Var rows_rotate(const Var& r, const Var& x) {
  if (r.shape().size() != 2 || r.shape()[1] != 9 || x.shape().size() != 2 ||
      x.shape()[1] != 3 || r.shape()[0] != x.shape()[0])
    fail(ErrorCode::ShapeMismatch, "rows_rotate: expected (N,9) and (N,3)");
  int64_t n = r.shape()[0];
  std::vector<double> out(n * 3);
  const auto& rv = r.value();
  const auto& xv = x.value();
  for (int64_t i = 0; i < n; ++i) {
    const double* m = rv.data() + i * 9;
    const double* v = xv.data() + i * 3;
    double* y = out.data() + i * 3;
    for (int a2 = 0; a2 < 3; ++a2)
      y[a2] = m[a2 * 3] * v[0] + m[a2 * 3 + 1] * v[1] + m[a2 * 3 + 2] * v[2];
  }
  auto rn = r.node();
  auto xn = x.node();
  auto bp = [rn, xn, n](Node& self) {
    for (int64_t i = 0; i < n; ++i) {
      const double* g = self.grad.data() + i * 3;
      if (rn->needs_grad) {
        rn->ensure_grad();
        const double* v = xn->val.data() + i * 3;
        for (int a2 = 0; a2 < 3; ++a2)
          for (int b2 = 0; b2 < 3; ++b2)
            rn->grad[i * 9 + a2 * 3 + b2] += g[a2] * v[b2];
      }
      if (xn->needs_grad) {
        xn->ensure_grad();
        const double* m = rn->val.data() + i * 9;
        for (int b2 = 0; b2 < 3; ++b2)
          xn->grad[i * 3 + b2] +=
              m[b2] * g[0] + m[3 + b2] * g[1] + m[6 + b2] * g[2];
      }
    }
  };
  return Var(make_node({n, 3}, std::move(out), {rn, xn}, bp, "rows_rotate"));
}

Var to_local_frames(const Var& r, const Var& t, const Var& x) {
  if (r.shape().size() != 2 || r.shape()[1] != 9 || t.shape().size() != 2 ||
      t.shape()[1] != 3 || r.shape()[0] != t.shape()[0] ||
      x.shape().size() != 2 || x.shape()[1] != 3)
    fail(ErrorCode::ShapeMismatch, "to_local_frames: bad shapes");
  int64_t n = r.shape()[0], m = x.shape()[0];
  std::vector<double> out(n * m * 3);
  const auto& rv = r.value();
  const auto& tv = t.value();
  const auto& xv = x.value();
  for (int64_t i = 0; i < n; ++i) {
    const double* rm = rv.data() + i * 9;
    const double* ti = tv.data() + i * 3;
    for (int64_t j = 0; j < m; ++j) {
      double d[3] = {xv[j * 3] - ti[0], xv[j * 3 + 1] - ti[1],
                     xv[j * 3 + 2] - ti[2]};
      double* o = out.data() + (i * m + j) * 3;
      for (int p = 0; p < 3; ++p)
        o[p] = rm[p] * d[0] + rm[3 + p] * d[1] + rm[6 + p] * d[2];
    }
  }
  auto rn = r.node();
  auto tn = t.node();
  auto xn = x.node();
  auto bp = [rn, tn, xn, n, m](Node& self) {
    if (rn->needs_grad) rn->ensure_grad();
    if (tn->needs_grad) tn->ensure_grad();
    if (xn->needs_grad) xn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const double* rm = rn->val.data() + i * 9;
      const double* ti = tn->val.data() + i * 3;
      for (int64_t j = 0; j < m; ++j) {
        const double* g = self.grad.data() + (i * m + j) * 3;
        // rot = R * g (since L = R^T d).
        double rg[3];
        for (int a2 = 0; a2 < 3; ++a2)
          rg[a2] = rm[a2 * 3] * g[0] + rm[a2 * 3 + 1] * g[1] + rm[a2 * 3 + 2] * g[2];
        if (xn->needs_grad)
          for (int a2 = 0; a2 < 3; ++a2) xn->grad[j * 3 + a2] += rg[a2];
        if (tn->needs_grad)
          for (int a2 = 0; a2 < 3; ++a2) tn->grad[i * 3 + a2] -= rg[a2];
        if (rn->needs_grad) {
          double d[3] = {xn->val[j * 3] - ti[0], xn->val[j * 3 + 1] - ti[1],
                         xn->val[j * 3 + 2] - ti[2]};
          for (int q = 0; q < 3; ++q)
            for (int p = 0; p < 3; ++p)
              rn->grad[i * 9 + q * 3 + p] += d[q] * g[p];
        }
      }
    }
  };
  return Var(make_node({n * m, 3}, std::move(out), {rn, tn, xn}, bp,
                       "to_local_frames"));
}

Var stop_gradient(const Var& a) {
  return Var::constant(a.shape(), a.value());
}

void backward(const Var& loss) {
  if (loss.size() != 1)
    fail(ErrorCode::NotScalar, "backward: loss has shape " + shape_str(loss.shape()));
  auto root = loss.node();
  if (!root->needs_grad) return;
  // Iterative postorder DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child->needs_grad && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

Var& ParameterStore::at(const std::string& path) {
  auto it = params.find(path);
  if (it == params.end())
    fail(ErrorCode::InvalidArgument, "unknown parameter: " + path);
  return it->second;
}

const Var& ParameterStore::at(const std::string& path) const {
  auto it = params.find(path);
  if (it == params.end())
    fail(ErrorCode::InvalidArgument, "unknown parameter: " + path);
  return it->second;
}

void ParameterStore::add(const std::string& path, Var v) {
  if (params.count(path))
    fail(ErrorCode::InvalidArgument, "duplicate parameter: " + path);
  params.emplace(path, std::move(v));
}

void zero_gradients(ParameterStore& store) {
  for (auto& [path, var] : store.params) {
    (void)path;
    auto n = var.node();
    n->grad.assign(n->val.size(), 0.0);
  }
}

GradientMap collect_gradients(const ParameterStore& store) {
  GradientMap g;
  for (const auto& [path, var] : store.params) {
    auto n = var.node();
    if (n->grad.size() == n->val.size())
      g[path] = n->grad;
    else
      g[path] = std::vector<double>(n->val.size(), 0.0);
  }
  return g;
}

double grad_check(const std::function<Var(const std::vector<Var>&)>& f,
                  std::vector<Var> inputs, double h) {
  for (auto& in : inputs) in.node()->grad.assign(in.size(), 0.0);
  Var loss = f(inputs);
  if (loss.size() != 1) fail(ErrorCode::NotScalar, "grad_check: f must be scalar");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    in.node()->ensure_grad();
    analytic.push_back(in.node()->grad);
  }
  double max_err = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].needs_grad()) continue;
    auto& vals = inputs[i].mutable_value();
    for (size_t j = 0; j < vals.size(); ++j) {
      double saved = vals[j];
      vals[j] = saved + h;
      double fp = f(inputs).item();
      vals[j] = saved - h;
      double fm = f(inputs).item();
      vals[j] = saved;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[i][j];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace sao::ad
