#pragma once

#include "mucp/graph.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mucp {

// Differentiable operations on graph variables. Every op records its result on
// the graph of its first operand. Shape violations throw DimensionError.

Var matmul(Var a, Var b);
/// x·w + b for x [n×in], w [in×out], b [out].
Var linear(Var x, Var w, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var x, float factor);
/// x multiplied by the single element of `s`.
Var scale_by(Var x, Var s);
/// Adds row vector b [m] to every row of x [n×m].
Var add_row(Var x, Var b);
/// Adds t [r×m] to x [n×m] cyclically: row i receives t[i mod r].
Var add_tiled(Var x, Var t);
/// Multiplies row i of x [n×m] by s[i]; s has n elements.
Var scale_rows(Var x, Var s);

Var gelu(Var x);
Var exp(Var x);
/// Natural log; throws NumericError on non-positive input.
Var log(Var x);

Var reshape(Var x, Shape shape);
/// 2-D transpose.
Var transpose(Var x);
Var concat_rows(Var a, Var b);
/// Rows idx[i] of x. Repeated indices are allowed; out-of-range throws IndexError.
Var gather_rows(Var x, std::span<const std::int64_t> idx);
/// Output [rows×m] with x row i added into output row idx[i].
Var scatter_add_rows(Var x, std::span<const std::int64_t> idx, std::int64_t rows);
/// Flat elements x[idx[i]] as a rank-1 tensor.
Var take(Var x, std::span<const std::int64_t> idx);

Var sum(Var x);
Var mean(Var x);
/// Mean over rows of x [n×m] -> [m].
Var column_mean(Var x);
/// Sum over columns of x [n×m] -> [n].
Var row_sum(Var x);
/// Max-subtracted log-sum-exp along `axis`; the axis is removed.
Var logsumexp(Var x, int axis);
Var softmax(Var x, int axis);

/// Row-wise layer normalization of x [n×m] followed by the gain/bias affine.
Var layer_norm(Var x, Var gain, Var bias, float eps = 1e-5f);
Var l2_normalize_rows(Var x, float eps = 1e-12f);

/// Multi-head scaled dot-product self-attention without causal masking.
/// qkv is [batch*seq × 3D] with the query, key and value blocks side by side;
/// key_padding (batch*seq, nonzero = padding) masks keys and may be empty.
Var multi_head_attention(Var qkv, std::int64_t batch, std::int64_t seq, std::int64_t heads,
                         std::span<const std::uint8_t> key_padding = {});

}  // namespace mucp
