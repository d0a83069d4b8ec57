#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "mspcaps/tensor.hpp"

namespace mspcaps {

enum class ElementwiseOp { add, sub, mul, div, neg, relu, exp, log, sqrt, power };
enum class ReduceOp { sum, mean, max };

/// Result shape of trailing-dimension broadcasting, or ShapeError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

/// Unary ops take no `b`; binary ops broadcast `a` against `b`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a,
                      const std::optional<Tensor<T>>& b = std::nullopt);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> power(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <typename T> Tensor<T> operator+(T s, const Tensor<T>& a) { return add(Tensor<T>::scalar(s), a); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <typename T> Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }

/// Batched matrix product over the trailing two dims; leading dims broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Reduction along one axis. Max sends the gradient to the first maximal
/// element (lowest index along the axis).
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, int axis, bool keepdims = false);

template <typename T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdims = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdims = false);
template <typename T> Tensor<T> max(const Tensor<T>& x, int axis, bool keepdims = false);
/// Sum of every element, as a scalar.
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);

/// Max-subtracted softmax; throws NumericError on non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Copying reshape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b);

/// Gathers `indices` along `axis`; the backward pass scatter-adds.
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::size_t>& indices);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// Normalizes a possibly negative axis against `rank`; throws AxisError.
std::size_t normalize_axis(int axis, std::size_t rank);

}  // namespace mspcaps
