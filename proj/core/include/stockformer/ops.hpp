#pragma once

#include <vector>

#include "stockformer/tape.hpp"
#include "stockformer/tensor.hpp"

namespace stockformer {

// Differentiable primitives. Every op validates shapes, rejects non-finite
// results, and records a backward closure on the active tape when any input
// requires grad. Binary ops demand exactly equal shapes; the only broadcast
// forms are the explicit ones below (broadcast_rows, shift, scale).

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor shift(const Tensor& a, double s);  // a + s
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor ln(const Tensor& a);  // all elements must be > 0
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);  // subgradient 0 at 0

// ---- linear algebra ----
/// Batched matrix product. Ranks 2 or 3; rank-3 operands need equal batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swap the two axes of a rank-2 tensor.
Tensor transpose(const Tensor& a);

// ---- reductions and shaping ----
Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]
/// Column means of [L, c] -> [c].
Tensor mean_rows(const Tensor& a);
/// Repeat a [c] vector into [rows, c].
Tensor broadcast_rows(const Tensor& v, Index rows);
Tensor reshape(const Tensor& a, Shape shape);  // same element count
Tensor concat_cols(const std::vector<Tensor>& parts);  // [L,ci] -> [L, sum ci]
Tensor slice_cols(const Tensor& a, Index from, Index to);  // [L,c] -> [L, to-from)
Tensor gather_rows(const Tensor& a, const std::vector<Index>& rows);
/// Stack [1] scalars into a vector [N].
Tensor stack_scalars(const std::vector<Tensor>& scalars);
/// Row-wise merge: out[i] = a[rank of i in selected] if i is selected,
/// else b[i]. `selected` must be sorted ascending and distinct.
Tensor compose_rows(const std::vector<Index>& selected, const Tensor& a,
                    const Tensor& b);

// ---- neural-net primitives ----
/// Softmax over the last axis, max-subtracted for stability.
Tensor softmax_last_axis(const Tensor& a);
/// Normalize the last axis to zero mean / unit variance, then affine.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double epsilon = 1e-5);
/// Width-3, stride-1 correlation with circular padding. x: [L, c_in],
/// kernels: [c_out, c_in, 3] -> [L, c_out]. Length is preserved.
Tensor conv1d_circular(const Tensor& x, const Tensor& kernels);
/// Max pool, kernel 3 / stride 2 / one -inf pad each side:
/// [L, c] -> [ceil(L/2), c].
Tensor max_pool1d(const Tensor& x);
/// Inverted dropout; a no-op when p == 0. Mask is drawn from `rng`.
Tensor dropout(const Tensor& x, double p, Rng& rng);

}  // namespace stockformer
