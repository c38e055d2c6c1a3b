#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbnlab/tape.hpp"

namespace cbnlab {

// Cross-correlation of [N,C,H,W] with [F,C,kh,kw]. The output extent must
// divide exactly: (H + 2*padding - kh) % stride == 0.
Var conv2d(Var input, Var kernel, int stride, int padding);

// input[N,D] * weight[D,K] + bias[K].
Var dense(Var input, Var weight, Var bias);

Var relu(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var x);

// Row-wise over the last axis of a rank-2 tensor.
Var softmax(Var logits);
Var log_softmax(Var logits);

// Mean over the batch of -log_softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);

// Mean over the batch of KL(softmax(p) || softmax(q)).
Var kl_divergence(Var p_logits, Var q_logits);

// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);

// Scalar view of one element (flat index).
Var pick(Var x, std::size_t index);

// Columns [begin, begin + count) of a rank-2 tensor.
Var slice_cols(Var x, std::size_t begin, std::size_t count);

// Plain-value kernels shared with the reference oracles in tests.
namespace kernels {
// Reference nested-loop cross-correlation (no tape).
void conv2d_direct(const Tensor& x, const Tensor& k, int stride, int padding,
                   Tensor& out);
void softmax_rows(std::span<const double> in, std::size_t rows,
                  std::size_t cols, std::span<double> out);
void log_softmax_rows(std::span<const double> in, std::size_t rows,
                      std::size_t cols, std::span<double> out);
}  // namespace kernels

}  // namespace cbnlab
