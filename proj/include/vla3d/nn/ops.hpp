#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "vla3d/nn/autodiff.hpp"

// Differentiable ops over rank-2 tensors. Every op checks its output for
// NaN/Inf and throws numeric_error.
namespace vla3d::nn {

// Linear algebra.
Var matmul(const Var& a, const Var& b);    // [n,k] x [k,m]
Var matmul_t(const Var& a, const Var& b);  // [n,k] x [m,k]^T
Var transpose(const Var& a);

// Elementwise binary (same shape).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);

// Broadcasting.
Var add_row(const Var& a, const Var& row);  // [n,m] + [1,m]
Var mul_row(const Var& a, const Var& row);  // [n,m] * [1,m]
Var add_col(const Var& a, const Var& col);  // [n,m] + [n,1]
Var mul_col(const Var& a, const Var& col);  // [n,m] * [n,1]
Var div_col(const Var& a, const Var& col);  // [n,m] / [n,1]
Var mul_scalar(const Var& a, const Var& s);  // [n,m] * [1,1]

// Constants.
Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);
Var clamp_min(const Var& a, double lo);

// Elementwise unary.
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);  // exact erf form
Var softplus(const Var& a);
Var pow_const(const Var& a, double p);  // a > 0 unless p is a non-negative integer
Var smooth_l1(const Var& a, double beta = 1.0);

// Reductions.
Var sum(const Var& a);       // -> [1,1]
Var mean(const Var& a);      // -> [1,1]
Var sum_rows(const Var& a);  // sum over columns -> [n,1]
Var sum_cols(const Var& a);  // sum over rows -> [1,m]

// Normalization and attention primitives.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_rows(const Var& x);

// Layout.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
Var slice_rows(const Var& a, std::size_t start, std::size_t count);
Var gather_rows(const Var& a, std::span<const std::size_t> idx);
Var reshape(const Var& a, Shape shape);
/// out.flat[i] = a.flat[src[i]]; backward scatters. Covers permutations,
/// space-to-depth and depth-to-space rearrangements.
Var take(const Var& a, std::span<const std::size_t> src, Shape out_shape);

/// Rotates each consecutive channel pair (2i, 2i+1) of every head by the
/// angle table `angles` [n, heads*head_dim/2]. Coordinates are constants, so
/// the op is linear in x and its adjoint is the inverse rotation.
Var rotate_pairs(const Var& x, const Tensor& angles);

/// Align-corners bilinear sample with border clamp. `map` is [h*w, C] in
/// row-major pixel order; `coords` is [P,2] with (x, y) in [0,1]. Returns
/// [P, count] reading channels [chan_off, chan_off+count).
Var bilinear_sample(const Var& map, std::size_t h, std::size_t w, const Var& coords, std::size_t chan_off,
                    std::size_t count);

/// Multi-scale deformable sampling kernel.
///   out[j, m*dh + c] = sum_{k,s} weights[j,(m*K+k)*S+s] *
///                      sample(levels[s], pivot[j] + offsets[j, ((m*K+k)*S+s)*2 ..], channel m*dh+c)
/// levels[s] is [h_s*w_s, Ch] with Ch = heads*dh. Pivots are constants.
struct LevelShape {
  std::size_t h;
  std::size_t w;
};
Var deformable_sample(std::span<const Var> levels, std::span<const LevelShape> shapes, const Tensor& pivots,
                      const Var& offsets, const Var& weights, std::size_t heads, std::size_t keys);

/// softmax(Q K^T / sqrt(d_k)) V. Throws shape_error on an empty key set.
Var softmax_attention(const Var& q, const Var& k, const Var& v, std::size_t d_k);
/// Same with an additive logit bias [n_q, n_k].
Var softmax_attention_biased(const Var& q, const Var& k, const Var& v, std::size_t d_k, const Var& bias);

/// Scalar bilinear helper shared by the sampling ops and tests of the kernel.
struct BilinearTap {
  std::size_t idx[4];
  double w[4];
  double dwdx[4];
  double dwdy[4];
  bool clamped_x;
  bool clamped_y;
};
BilinearTap bilinear_tap(std::size_t h, std::size_t w, double x, double y);

}  // namespace vla3d::nn
