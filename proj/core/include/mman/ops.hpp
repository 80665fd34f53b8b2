#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mman/tensor.hpp"

namespace mman {

// True entry = real position, false = padded/ignored.
using Mask = std::vector<std::uint8_t>;

// ---- elementwise (same shape) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);

// ---- activations ----
Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor relu(const Tensor& x);

// ---- structure ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose_last2(const Tensor& x);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);

// ---- broadcast arithmetic ----
// `v` matches dim 0 of `x`; applied across all trailing positions.
Tensor scale_channels(const Tensor& x, const Tensor& v);
Tensor shift_channels(const Tensor& x, const Tensor& v);
// `v`'s shape is a trailing suffix of `x`'s; applied across leading dims.
Tensor scale_features(const Tensor& x, const Tensor& v);
Tensor shift_features(const Tensor& x, const Tensor& v);

// ---- linear algebra ----
// Batched matrix product over the last two dims; leading batch extents must
// match or broadcast from 1 (missing leading dims count as 1).
Tensor matmul(const Tensor& a, const Tensor& b);
// matmul(a, transpose_last2(b)) without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x: ..xp, w: pxq, b: q -> ..xq
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_lastdim(const Tensor& x);
// Mean over dim 0 restricted to rows with mask true; at least one required.
Tensor masked_mean_dim0(const Tensor& x, const Mask& mask);
// Euclidean norm along the last dim; gradient at a zero vector is zero.
Tensor norm_lastdim(const Tensor& x);

// Stacks equally sized tensors as rows of an Nxlen matrix (each input is
// flattened); gradient splits back to the inputs.
Tensor stack_rows(const std::vector<Tensor>& rows);

// ---- attention pieces ----
Tensor softmax_lastdim(const Tensor& x);
// Replaces scores of masked keys (last dim) with a large negative constant
// so they vanish from the softmax; gradient passes only through kept keys.
Tensor mask_scores(const Tensor& scores, const Mask& key_mask);

// ---- nn layers ----
// x: CxL, kernels: OxCxK, valid cross-correlation, out_len=(L-K)/stride+1.
Tensor conv1d(const Tensor& x, const Tensor& kernels, std::size_t stride);
// x: CxHxW, kernels: OxCxKhxKw.
Tensor conv2d(const Tensor& x, const Tensor& kernels, std::size_t stride_h,
              std::size_t stride_w);
// x: CxL, non-overlapping when stride==window; ties take the first index.
Tensor max_pool1d(const Tensor& x, std::size_t window, std::size_t stride);
// table: Vxd, one output row per id.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Normalizes over the last dim. gain/bias have that dim's extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// Identity when !training or rate==0 (returns x itself); otherwise an
// inverted-scale mask drawn from rng in row-major order.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool training);

namespace debug {
// Test hook: when set, the tanh adjoint is deliberately wrong. Used by the
// gradcheck negative-control path only.
extern bool corrupt_tanh_adjoint;
} // namespace debug

} // namespace mman
