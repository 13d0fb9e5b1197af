#include "vla3d/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace vla3d::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t) { return MapC(t.storage().data(), t.rows(), t.cols()); }
MapM as_mat(Tensor& t) { return MapM(t.storage().data(), t.rows(), t.cols()); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw shape_error(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

/// Wraps a freshly computed value into a graph node when any input needs a gradient.
Var make_op(const char* name, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  value.check_finite(name);
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (!needs) return Var(std::move(value));
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  for (const auto& v : inputs) n->parents.push_back(v.node());
  n->backward = std::move(fn);
  return Var(std::move(n));
}

Var make_op_list(const char* name, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  value.check_finite(name);
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (!needs) return Var(std::move(value));
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  for (const auto& v : inputs) n->parents.push_back(v.node());
  n->backward = std::move(fn);
  return Var(std::move(n));
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline Tensor& gbuf(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

/// Elementwise unary op with derivative expressed through (x, y).
template <class F, class D>
Var unary(const char* name, const Var& a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_op(name, std::move(y), {a}, [dfdx](Node& self) {
    if (!wants(self, 0)) return;
    const Tensor& x = self.parents[0]->value;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  if (A.cols() != B.rows()) throw shape_error("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  Tensor out({A.rows(), B.cols()});
  as_mat(out).noalias() = as_mat(A) * as_mat(B);
  return make_op("matmul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    if (wants(self, 0)) as_mat(gbuf(self, 0)).noalias() += as_mat(self.grad) * as_mat(B).transpose();
    if (wants(self, 1)) as_mat(gbuf(self, 1)).noalias() += as_mat(A).transpose() * as_mat(self.grad);
  });
}

Var matmul_t(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul_t");
  require_rank2(B, "matmul_t");
  if (A.cols() != B.cols()) throw shape_error("matmul_t: " + shape_str(A.shape()) + " x " + shape_str(B.shape()) + "^T");
  Tensor out({A.rows(), B.rows()});
  as_mat(out).noalias() = as_mat(A) * as_mat(B).transpose();
  return make_op("matmul_t", std::move(out), {a, b}, [](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    if (wants(self, 0)) as_mat(gbuf(self, 0)).noalias() += as_mat(self.grad) * as_mat(B);
    if (wants(self, 1)) as_mat(gbuf(self, 1)).noalias() += as_mat(self.grad).transpose() * as_mat(A);
  });
}

Var transpose(const Var& a) {
  const Tensor& A = a.value();
  require_rank2(A, "transpose");
  Tensor out({A.cols(), A.rows()});
  as_mat(out) = as_mat(A).transpose();
  return make_op("transpose", std::move(out), {a}, [](Node& self) {
    if (wants(self, 0)) as_mat(gbuf(self, 0)) += as_mat(self.grad).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

Var add(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op("add", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants(self, p)) continue;
      Tensor& g = gbuf(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op("sub", std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op("mul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B[i];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_op("div", std::move(out), {a, b}, [](Node& self) {
    const Tensor& B = self.parents[1]->value;
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / B[i];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / B[i];
    }
  });
}

namespace {
Var select_binary(const char* name, const Var& a, const Var& b, bool take_max) {
  require_same(a.value(), b.value(), name);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.value()[i], y = b.value()[i];
    out[i] = take_max ? std::max(x, y) : std::min(x, y);
  }
  return make_op(name, std::move(out), {a, b}, [take_max](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    for (std::size_t i = 0; i < A.size(); ++i) {
      // Ties route the gradient to the first operand.
      const bool first = take_max ? (A[i] >= B[i]) : (A[i] <= B[i]);
      const std::size_t p = first ? 0 : 1;
      if (wants(self, p)) gbuf(self, p)[i] += self.grad[i];
    }
  });
}
}  // namespace

Var maximum(const Var& a, const Var& b) { return select_binary("maximum", a, b, true); }
Var minimum(const Var& a, const Var& b) { return select_binary("minimum", a, b, false); }

// ---------------------------------------------------------------------------
// Broadcasting

Var add_row(const Var& a, const Var& row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  require_rank2(A, "add_row");
  if (R.rows() != 1 || R.cols() != A.cols()) throw shape_error("add_row: " + shape_str(A.shape()) + " + " + shape_str(R.shape()));
  Tensor out(A.shape());
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = A.at(i, j) + R[j];
  return make_op("add_row", std::move(out), {a, row}, [n, m](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

Var mul_row(const Var& a, const Var& row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  require_rank2(A, "mul_row");
  if (R.rows() != 1 || R.cols() != A.cols()) throw shape_error("mul_row: " + shape_str(A.shape()) + " * " + shape_str(R.shape()));
  Tensor out(A.shape());
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = A.at(i, j) * R[j];
  return make_op("mul_row", std::move(out), {a, row}, [n, m](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& R = self.parents[1]->value;
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * R[j];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j] * A[i * m + j];
    }
  });
}

Var add_col(const Var& a, const Var& col) {
  const Tensor& A = a.value();
  const Tensor& C = col.value();
  require_rank2(A, "add_col");
  if (C.cols() != 1 || C.rows() != A.rows()) throw shape_error("add_col: " + shape_str(A.shape()) + " + " + shape_str(C.shape()));
  Tensor out(A.shape());
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = A.at(i, j) + C[i];
  return make_op("add_col", std::move(out), {a, col}, [n, m](Node& self) {
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i] += self.grad[i * m + j];
    }
  });
}

Var mul_col(const Var& a, const Var& col) {
  const Tensor& A = a.value();
  const Tensor& C = col.value();
  require_rank2(A, "mul_col");
  if (C.cols() != 1 || C.rows() != A.rows()) throw shape_error("mul_col: " + shape_str(A.shape()) + " * " + shape_str(C.shape()));
  Tensor out(A.shape());
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = A.at(i, j) * C[i];
  return make_op("mul_col", std::move(out), {a, col}, [n, m](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& C = self.parents[1]->value;
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * C[i];
    }
    if (wants(self, 1)) {
      Tensor& g = gbuf(self, 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i] += self.grad[i * m + j] * A[i * m + j];
    }
  });
}

Var div_col(const Var& a, const Var& col) {
  const Tensor& C = col.value();
  Tensor inv(C.shape());
  for (std::size_t i = 0; i < C.size(); ++i) inv[i] = 1.0 / C[i];
  // d(1/c) = -1/c^2, expressed as its own node so mul_col handles broadcasting.
  Var recip = make_op("reciprocal", std::move(inv), {col}, [](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] * self.value[i];
  });
  return mul_col(a, recip);
}

Var mul_scalar(const Var& a, const Var& s) {
  const Tensor& A = a.value();
  if (s.value().size() != 1) throw shape_error("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const double k = s.value()[0];
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * k;
  return make_op("mul_scalar", std::move(out), {a, s}, [](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const double k = self.parents[1]->value[0];
    if (wants(self, 0)) {
      Tensor& g = gbuf(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * k;
    }
    if (wants(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < A.size(); ++i) acc += self.grad[i] * A[i];
      gbuf(self, 1)[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Constants and unary

Var scale(const Var& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_const(const Var& a, double c) {
  return unary("add_const", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var clamp_min(const Var& a, double lo) {
  return unary("clamp_min", a, [lo](double x) { return std::max(x, lo); },
               [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var tanh(const Var& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

namespace {
inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

Var softplus(const Var& a) {
  return unary(
      "softplus", a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(x); });
}

Var pow_const(const Var& a, double p) {
  return unary("pow_const", a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

Var smooth_l1(const Var& a, double beta) {
  return unary(
      "smooth_l1", a,
      [beta](double x) {
        const double ax = std::abs(x);
        return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
      },
      [beta](double x, double) {
        if (std::abs(x) < beta) return x / beta;
        return x > 0 ? 1.0 : -1.0;
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().storage()) s += x;
  return make_op("sum", Tensor::scalar(s), {a}, [](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw shape_error("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(const Var& a) {
  const Tensor& A = a.value();
  require_rank2(A, "sum_rows");
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += A.at(i, j);
    out[i] = s;
  }
  return make_op("sum_rows", std::move(out), {a}, [n, m](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i];
  });
}

Var sum_cols(const Var& a) {
  const Tensor& A = a.value();
  require_rank2(A, "sum_cols");
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({1, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += A.at(i, j);
  return make_op("sum_cols", std::move(out), {a}, [n, m](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[j];
  });
}

// ---------------------------------------------------------------------------
// Normalization

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& X = x.value();
  require_rank2(X, "layer_norm");
  const std::size_t n = X.rows(), d = X.cols();
  if (d == 0) throw shape_error("layer_norm: last dim must be >= 1");
  if (gamma.value().size() != d || beta.value().size() != d) throw shape_error("layer_norm: scale/shift width mismatch");
  Tensor xhat({n, d});
  Tensor inv_std({n, 1});
  Tensor out({n, d});
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += X.at(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (X.at(i, j) - mu) * (X.at(i, j) - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat.at(i, j) = (X.at(i, j) - mu) * is;
      out.at(i, j) = xhat.at(i, j) * G[j] + B[j];
    }
  }
  return make_op("layer_norm", std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Node& self) {
                   const Tensor& G = self.parents[1]->value;
                   const Tensor& gy = self.grad;
                   if (wants(self, 1)) {
                     Tensor& gg = gbuf(self, 1);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < d; ++j) gg[j] += gy.at(i, j) * xhat.at(i, j);
                   }
                   if (wants(self, 2)) {
                     Tensor& gb = gbuf(self, 2);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < d; ++j) gb[j] += gy.at(i, j);
                   }
                   if (wants(self, 0)) {
                     Tensor& gx = gbuf(self, 0);
                     const double inv_d = 1.0 / static_cast<double>(d);
                     for (std::size_t i = 0; i < n; ++i) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = gy.at(i, j) * G[j];
                         s1 += gh;
                         s2 += gh * xhat.at(i, j);
                       }
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = gy.at(i, j) * G[j];
                         gx.at(i, j) += inv_std[i] * (gh - inv_d * s1 - xhat.at(i, j) * inv_d * s2);
                       }
                     }
                   }
                 });
}

Var softmax_rows(const Var& x) {
  const Tensor& X = x.value();
  require_rank2(X, "softmax_rows");
  const std::size_t n = X.rows(), m = X.cols();
  if (m == 0) throw shape_error("softmax over an empty set");
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = X.at(i, 0);
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, X.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out.at(i, j) = std::exp(X.at(i, j) - mx);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) /= z;
  }
  return make_op("softmax_rows", std::move(out), {x}, [n, m](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    const Tensor& y = self.value;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < m; ++j) g.at(i, j) += y.at(i, j) * (self.grad.at(i, j) - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw shape_error("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t m = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    if (p.rows() != n) throw shape_error("concat_cols: row count mismatch");
    offs.push_back(m);
    m += p.cols();
  }
  Tensor out({n, m});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out.at(i, offs[k] + j) = P.at(i, j);
  }
  return make_op_list("concat_cols", std::move(out), parts, [offs, n, m](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = gbuf(self, k);
      const std::size_t w = g.cols();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) g.at(i, j) += self.grad[i * m + offs[k] + j];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw shape_error("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  std::vector<std::size_t> offs;
  for (const auto& p : parts) {
    if (p.cols() != m) throw shape_error("concat_rows: column count mismatch");
    offs.push_back(n);
    n += p.rows();
  }
  Tensor out({n, m});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].value().storage();
    std::copy(src.begin(), src.end(), out.storage().begin() + static_cast<std::ptrdiff_t>(offs[k] * m));
  }
  return make_op_list("concat_rows", std::move(out), parts, [offs, m](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants(self, k)) continue;
      Tensor& g = gbuf(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offs[k] * m + i];
    }
  });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require_rank2(A, "slice_cols");
  if (start + count > A.cols()) throw shape_error("slice_cols out of range");
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({n, count});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = A.at(i, start + j);
  return make_op("slice_cols", std::move(out), {a}, [start, count, n, m](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * m + start + j] += self.grad[i * count + j];
  });
}

Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require_rank2(A, "slice_rows");
  if (start + count > A.rows()) throw shape_error("slice_rows out of range");
  const std::size_t m = A.cols();
  std::vector<double> buf(A.storage().begin() + static_cast<std::ptrdiff_t>(start * m),
                          A.storage().begin() + static_cast<std::ptrdiff_t>((start + count) * m));
  Tensor out({count, m}, std::move(buf));
  return make_op("slice_rows", std::move(out), {a}, [start, m](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * m + i] += self.grad[i];
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> idx) {
  const Tensor& A = a.value();
  require_rank2(A, "gather_rows");
  const std::size_t m = A.cols();
  Tensor out({idx.size(), m});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= A.rows()) throw shape_error("gather_rows index out of range");
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) = A.at(idx[i], j);
  }
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  return make_op("gather_rows", std::move(out), {a}, [ix = std::move(ix), m](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < ix.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) g[ix[i] * m + j] += self.grad[i * m + j];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op("reshape", std::move(out), {a}, [](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var take(const Var& a, std::span<const std::size_t> src, Shape out_shape) {
  const Tensor& A = a.value();
  if (shape_numel(out_shape) != src.size()) throw shape_error("take: index count does not match output shape");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= A.size()) throw shape_error("take: index out of range");
    out[i] = A[src[i]];
  }
  std::vector<std::size_t> ix(src.begin(), src.end());
  return make_op("take", std::move(out), {a}, [ix = std::move(ix)](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < ix.size(); ++i) g[ix[i]] += self.grad[i];
  });
}

Var rotate_pairs(const Var& x, const Tensor& angles) {
  const Tensor& X = x.value();
  require_rank2(X, "rotate_pairs");
  const std::size_t n = X.rows(), d = X.cols();
  if (d % 2 != 0 || angles.rows() != n || angles.cols() != d / 2) {
    throw shape_error("rotate_pairs: angle table " + shape_str(angles.shape()) + " incompatible with " + shape_str(X.shape()));
  }
  Tensor cs({n, d / 2}), sn({n, d / 2});
  for (std::size_t i = 0; i < angles.size(); ++i) {
    cs[i] = std::cos(angles[i]);
    sn[i] = std::sin(angles[i]);
  }
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d / 2; ++p) {
      const double a = X.at(i, 2 * p), b = X.at(i, 2 * p + 1);
      const double c = cs.at(i, p), s = sn.at(i, p);
      out.at(i, 2 * p) = a * c - b * s;
      out.at(i, 2 * p + 1) = a * s + b * c;
    }
  return make_op("rotate_pairs", std::move(out), {x}, [cs = std::move(cs), sn = std::move(sn), n, d](Node& self) {
    if (!wants(self, 0)) return;
    Tensor& g = gbuf(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < d / 2; ++p) {
        const double ga = self.grad.at(i, 2 * p), gb = self.grad.at(i, 2 * p + 1);
        const double c = cs.at(i, p), s = sn.at(i, p);
        g.at(i, 2 * p) += ga * c + gb * s;
        g.at(i, 2 * p + 1) += -ga * s + gb * c;
      }
  });
}

// ---------------------------------------------------------------------------
// Sampling

BilinearTap bilinear_tap(std::size_t h, std::size_t w, double x, double y) {
  BilinearTap t{};
  t.clamped_x = x < 0.0 || x > 1.0;
  t.clamped_y = y < 0.0 || y > 1.0;
  x = std::clamp(x, 0.0, 1.0);
  y = std::clamp(y, 0.0, 1.0);
  const double sx = static_cast<double>(w - 1), sy = static_cast<double>(h - 1);
  const double px = x * sx, py = y * sy;
  const std::size_t x0 = std::min(static_cast<std::size_t>(std::floor(px)), w - 1);
  const std::size_t y0 = std::min(static_cast<std::size_t>(std::floor(py)), h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const double fx = px - static_cast<double>(x0), fy = py - static_cast<double>(y0);
  t.idx[0] = y0 * w + x0;
  t.idx[1] = y0 * w + x1;
  t.idx[2] = y1 * w + x0;
  t.idx[3] = y1 * w + x1;
  t.w[0] = (1 - fx) * (1 - fy);
  t.w[1] = fx * (1 - fy);
  t.w[2] = (1 - fx) * fy;
  t.w[3] = fx * fy;
  // Derivatives with respect to the normalized coordinate; zero where clamped.
  const double kx = t.clamped_x ? 0.0 : sx;
  const double ky = t.clamped_y ? 0.0 : sy;
  t.dwdx[0] = -(1 - fy) * kx;
  t.dwdx[1] = (1 - fy) * kx;
  t.dwdx[2] = -fy * kx;
  t.dwdx[3] = fy * kx;
  t.dwdy[0] = -(1 - fx) * ky;
  t.dwdy[1] = -fx * ky;
  t.dwdy[2] = (1 - fx) * ky;
  t.dwdy[3] = fx * ky;
  return t;
}

Var bilinear_sample(const Var& map, std::size_t h, std::size_t w, const Var& coords, std::size_t chan_off,
                    std::size_t count) {
  const Tensor& M = map.value();
  const Tensor& U = coords.value();
  require_rank2(M, "bilinear_sample");
  if (M.rows() != h * w || chan_off + count > M.cols()) throw shape_error("bilinear_sample: map layout mismatch");
  if (U.cols() != 2) throw shape_error("bilinear_sample: coords must be [P,2]");
  const std::size_t P = U.rows(), C = M.cols();
  Tensor out({P, count});
  std::vector<BilinearTap> taps(P);
  for (std::size_t p = 0; p < P; ++p) {
    if (!std::isfinite(U.at(p, 0)) || !std::isfinite(U.at(p, 1))) throw numeric_error("bilinear_sample: non-finite coordinate");
    taps[p] = bilinear_tap(h, w, U.at(p, 0), U.at(p, 1));
    for (int q = 0; q < 4; ++q)
      for (std::size_t c = 0; c < count; ++c) out.at(p, c) += taps[p].w[q] * M[taps[p].idx[q] * C + chan_off + c];
  }
  return make_op("bilinear_sample", std::move(out), {map, coords},
                 [taps = std::move(taps), chan_off, count, C](Node& self) {
                   const Tensor& M = self.parents[0]->value;
                   const bool gm = wants(self, 0), gu = wants(self, 1);
                   for (std::size_t p = 0; p < taps.size(); ++p) {
                     const auto& t = taps[p];
                     double dx = 0.0, dy = 0.0;
                     for (int q = 0; q < 4; ++q) {
                       for (std::size_t c = 0; c < count; ++c) {
                         const double go = self.grad[p * count + c];
                         if (gm) gbuf(self, 0)[t.idx[q] * C + chan_off + c] += go * t.w[q];
                         const double v = M[t.idx[q] * C + chan_off + c];
                         dx += go * v * t.dwdx[q];
                         dy += go * v * t.dwdy[q];
                       }
                     }
                     if (gu) {
                       gbuf(self, 1)[p * 2] += dx;
                       gbuf(self, 1)[p * 2 + 1] += dy;
                     }
                   }
                 });
}

Var deformable_sample(std::span<const Var> levels, std::span<const LevelShape> shapes, const Tensor& pivots,
                      const Var& offsets, const Var& weights, std::size_t heads, std::size_t keys) {
  const std::size_t S = levels.size();
  if (S == 0 || shapes.size() != S) throw shape_error("deformable_sample: level/shape count mismatch");
  const std::size_t Ch = levels[0].cols();
  if (Ch % heads != 0) throw shape_error("deformable_sample: channels not divisible by heads");
  const std::size_t dh = Ch / heads;
  const std::size_t J = pivots.rows();
  const std::size_t pts = heads * keys * S;
  if (offsets.rows() != J || offsets.cols() != pts * 2 || weights.rows() != J || weights.cols() != pts) {
    throw shape_error("deformable_sample: offsets/weights layout mismatch");
  }
  for (std::size_t s = 0; s < S; ++s) {
    if (levels[s].cols() != Ch || levels[s].rows() != shapes[s].h * shapes[s].w) {
      throw shape_error("deformable_sample: level " + std::to_string(s) + " layout mismatch");
    }
  }
  const Tensor& O = offsets.value();
  const Tensor& A = weights.value();
  std::vector<BilinearTap> taps(J * pts);
  Tensor out({J, Ch});
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t m = 0; m < heads; ++m)
      for (std::size_t k = 0; k < keys; ++k)
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t pt = (m * keys + k) * S + s;
          const double x = pivots.at(j, 0) + O.at(j, pt * 2);
          const double y = pivots.at(j, 1) + O.at(j, pt * 2 + 1);
          const BilinearTap t = bilinear_tap(shapes[s].h, shapes[s].w, x, y);
          taps[j * pts + pt] = t;
          const Tensor& L = levels[s].value();
          const double a = A.at(j, pt);
          for (int q = 0; q < 4; ++q) {
            const double wq = a * t.w[q];
            const double* src = &L.storage()[t.idx[q] * Ch + m * dh];
            double* dst = &out.storage()[j * Ch + m * dh];
            for (std::size_t c = 0; c < dh; ++c) dst[c] += wq * src[c];
          }
        }

  std::vector<Var> inputs(levels.begin(), levels.end());
  inputs.push_back(offsets);
  inputs.push_back(weights);
  return make_op_list("deformable_sample", std::move(out), inputs, [taps = std::move(taps), S, J, heads, keys, dh, Ch, pts](Node& self) {
    const std::size_t oi = S, wi = S + 1;
    const Tensor& A = self.parents[wi]->value;
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t m = 0; m < heads; ++m)
        for (std::size_t k = 0; k < keys; ++k)
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t pt = (m * keys + k) * S + s;
            const BilinearTap& t = taps[j * pts + pt];
            const Tensor& L = self.parents[s]->value;
            const double a = A.at(j, pt);
            const double* go = &self.grad.storage()[j * Ch + m * dh];
            double dA = 0.0, dx = 0.0, dy = 0.0;
            for (int q = 0; q < 4; ++q) {
              const double* v = &L.storage()[t.idx[q] * Ch + m * dh];
              double dot = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dot += go[c] * v[c];
              dA += t.w[q] * dot;
              dx += a * t.dwdx[q] * dot;
              dy += a * t.dwdy[q] * dot;
              if (wants(self, s)) {
                double* gl = &gbuf(self, s).storage()[t.idx[q] * Ch + m * dh];
                for (std::size_t c = 0; c < dh; ++c) gl[c] += a * t.w[q] * go[c];
              }
            }
            if (wants(self, wi)) gbuf(self, wi).at(j, pt) += dA;
            if (wants(self, oi)) {
              gbuf(self, oi).at(j, pt * 2) += dx;
              gbuf(self, oi).at(j, pt * 2 + 1) += dy;
            }
          }
  });
}

// ---------------------------------------------------------------------------
// Attention

Var softmax_attention(const Var& q, const Var& k, const Var& v, std::size_t d_k) {
  if (k.rows() == 0) throw shape_error("softmax_attention: empty key set");
  if (q.cols() != k.cols()) throw shape_error("softmax_attention: Q/K width mismatch");
  if (k.rows() != v.rows()) throw shape_error("softmax_attention: K/V length mismatch");
  Var logits = scale(matmul_t(q, k), 1.0 / std::sqrt(static_cast<double>(d_k)));
  return matmul(softmax_rows(logits), v);
}

Var softmax_attention_biased(const Var& q, const Var& k, const Var& v, std::size_t d_k, const Var& bias) {
  if (k.rows() == 0) throw shape_error("softmax_attention: empty key set");
  if (q.cols() != k.cols()) throw shape_error("softmax_attention: Q/K width mismatch");
  if (k.rows() != v.rows()) throw shape_error("softmax_attention: K/V length mismatch");
  Var logits = add(scale(matmul_t(q, k), 1.0 / std::sqrt(static_cast<double>(d_k))), bias);
  return matmul(softmax_rows(logits), v);
}

}  // namespace vla3d::nn
