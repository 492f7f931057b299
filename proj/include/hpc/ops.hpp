#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hpc/tensor.hpp"

namespace hpc::diff {

enum class ElementwiseOp { kAdd, kSub, kMul, kDiv, kRelu, kExp, kLog, kSigmoid, kSoftplus, kTanh, kAbs, kSquare, kSqrt };

/// Binary ops broadcast numpy-style: shapes are right-aligned and each dim must
/// match or be 1 on one side.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(ElementwiseOp op, const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// max(x, floor); gradient is zero where the floor is active.
Tensor clamp_min(const Tensor& x, double floor);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x [n, in] times the weight block of wb [in + 1, out] plus its last row as bias.
Tensor linear(const Tensor& x, const Tensor& wb);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces one axis away.
Tensor sum_axis(const Tensor& x, std::size_t axis);
/// Global min / max as a 1-element tensor; gradient routes to the first arg-extremum.
Tensor min_all(const Tensor& x);
Tensor max_all(const Tensor& x);

/// Numerically stable softmax (max-subtracted) along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
/// Contiguous flat range [offset, offset + prod(shape)) viewed with `shape`.
Tensor view(const Tensor& x, std::size_t offset, Shape shape);
/// Columns [start, start + count) of a 2-D tensor.
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);

/// Row i of the result is rows[index[i]] followed by extra[i]. `extra` may be
/// undefined or have zero columns. Backward scatter-adds into `rows`.
Tensor gather_concat(const Tensor& rows, std::span<const std::uint32_t> index, const Tensor& extra);
Tensor gather_rows(const Tensor& rows, std::span<const std::uint32_t> index);

/// Forward rounds half-to-even, backward passes the gradient through unchanged.
Tensor round_ste(const Tensor& x);
/// x + offsets with identity gradient w.r.t. x; `offsets` is treated as constant.
Tensor add_constant(const Tensor& x, std::span<const double> offsets);

}  // namespace hpc::diff
