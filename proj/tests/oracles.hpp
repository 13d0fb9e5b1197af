#pragma once

// Independent reference computations used only by tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "vla3d/nn/rng.hpp"
#include "vla3d/nn/tensor.hpp"

namespace oracle {

using vla3d::nn::Tensor;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

inline Tensor random(std::size_t r, std::size_t c, vla3d::nn::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// Minimum assignment cost by enumerating every injective map rows->cols
/// choice of n rows for m columns (n >= m): tries all ordered m-subsets.
inline double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  const std::size_t m = n ? cost[0].size() : 0;
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Permute all rows; the first m rows of each permutation are assigned to columns 0..m-1.
  do {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += cost[rows[c]][c];
    best = std::min(best, s);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Greedy farthest point sampling on scalars.
inline std::vector<double> fps_1d(const std::vector<double>& pts, std::size_t start, std::size_t k) {
  std::vector<double> sel{pts[start]};
  while (sel.size() < k) {
    double best_d = -1.0, best = 0.0;
    for (double p : pts) {
      double d = std::numeric_limits<double>::infinity();
      for (double s : sel) d = std::min(d, std::abs(p - s));
      if (d > best_d) {
        best_d = d;
        best = p;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

}  // namespace oracle
