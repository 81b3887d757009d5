// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>
#include <span>
#include <vector>

#include "smd/numcore/tensor.hpp"

namespace smd::num {

/// Value that marks a logit as outside the softmax's visible set. Excluded
/// entries get a weight of exactly zero rather than exp(-large).
inline constexpr double kMaskSentinel = -std::numeric_limits<double>::infinity();

// All reductions run sequentially over the reduced axis in index order, so
// results are bit-reproducible for identical inputs.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);

/// Softmax over the last axis. Entries equal to kMaskSentinel are excluded.
/// Throws DegenerateRowError when a row has no visible entry.
Tensor softmax_last(const Tensor& x);
/// log(softmax_last(x)) computed with the max shift. Excluded entries map to
/// kMaskSentinel.
Tensor log_softmax_last(const Tensor& x);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Row sums of a rank-2 tensor, shape [rows].
Tensor sum_last(const Tensor& a);

/// out[r] = x[r, ids[r]] for rank-2 x.
Tensor gather_last(const Tensor& x, std::span<const int> ids);
/// Row lookup: out[i, :] = table[ids[i], :].
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Row-wise RMS normalization with a learned gain of length cols.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

/// Elementwise clamp; gradient is zero where the bound is active.
Tensor clamp(const Tensor& x, double lo, double hi);
/// Elementwise minimum; ties route the gradient to `a`.
Tensor minimum(const Tensor& a, const Tensor& b);

/// Value copy with no path back to x (stop-gradient).
Tensor detach(const Tensor& x);

}  // namespace smd::num
