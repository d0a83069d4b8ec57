#include "mspcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kernels.hpp"
#include "mspcaps/errors.hpp"

namespace mspcaps {

using detail::grad_buffer;
using detail::make_result;
using detail::Node;

std::size_t normalize_axis(int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw AxisError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

namespace {

// Per-output-dimension strides of an input aligned to the broadcast shape;
// broadcast dimensions get stride 0.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    const std::size_t offset = out.size() - in.size();
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[i + offset] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    return strides;
}

struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> sa;
    std::vector<std::size_t> sb;
    std::size_t n = 0;
    bool same = false;      // a, b, out all share a shape
    bool b_scalar = false;  // b has a single element, a has the output shape
};

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
    BroadcastPlan p;
    p.out = broadcast_shapes(a, b);
    p.sa = aligned_strides(a, p.out);
    p.sb = aligned_strides(b, p.out);
    p.n = shape_numel(p.out);
    p.same = a == b;
    p.b_scalar = shape_numel(b) == 1 && shape_numel(a) == p.n;
    return p;
}

// Calls f(i_out, i_a, i_b) for every output element in row-major order.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    if (p.same) {
        for (std::size_t i = 0; i < p.n; ++i) {
            f(i, i, i);
        }
        return;
    }
    if (p.b_scalar) {
        for (std::size_t i = 0; i < p.n; ++i) {
            f(i, i, std::size_t{0});
        }
        return;
    }
    const std::size_t rank = p.out.size();
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    const std::size_t inner = p.out[rank - 1];
    const std::size_t sa_in = p.sa[rank - 1];
    const std::size_t sb_in = p.sb[rank - 1];
    for (std::size_t i = 0; i < p.n; i += inner) {
        for (std::size_t j = 0; j < inner; ++j) {
            f(i + j, ia + j * sa_in, ib + j * sb_in);
        }
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++idx[d];
            ia += p.sa[d];
            ib += p.sb[d];
            if (idx[d] < p.out[d]) {
                break;
            }
            ia -= p.sa[d] * p.out[d];
            ib -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

const char* op_label(ElementwiseOp op) {
    switch (op) {
        case ElementwiseOp::add: return "add";
        case ElementwiseOp::sub: return "sub";
        case ElementwiseOp::mul: return "mul";
        case ElementwiseOp::div: return "div";
        case ElementwiseOp::neg: return "neg";
        case ElementwiseOp::relu: return "relu";
        case ElementwiseOp::exp: return "exp";
        case ElementwiseOp::log: return "log";
        case ElementwiseOp::sqrt: return "sqrt";
        case ElementwiseOp::power: return "power";
    }
    return "?";
}

bool is_binary(ElementwiseOp op) {
    switch (op) {
        case ElementwiseOp::add:
        case ElementwiseOp::sub:
        case ElementwiseOp::mul:
        case ElementwiseOp::div:
        case ElementwiseOp::power:
            return true;
        default:
            return false;
    }
}

template <typename T>
Tensor<T> binary(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
    const BroadcastPlan plan = make_plan(a.shape(), b.shape());
    const T* A = a.data().data();
    const T* B = b.data().data();
    std::vector<T> out(plan.n);
    switch (op) {
        case ElementwiseOp::add:
            for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] + B[ib]; });
            break;
        case ElementwiseOp::sub:
            for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] - B[ib]; });
            break;
        case ElementwiseOp::mul:
            for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] * B[ib]; });
            break;
        case ElementwiseOp::div:
            for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = A[ia] / B[ib]; });
            break;
        case ElementwiseOp::power:
            for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (A[ia] < T(0) && std::trunc(B[ib]) != B[ib]) {
                    throw DomainError("power: negative base with non-integer exponent");
                }
                out[i] = std::pow(A[ia], B[ib]);
            });
            break;
        default:
            throw ContractError(std::string("elementwise: ") + op_label(op) + " is not binary");
    }

    auto backward = [plan, op](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        const T* g = self.grad.data();
        const T* av = na.data.data();
        const T* bv = nb.data.data();
        const T* y = self.data.data();
        if (na.requires_grad) {
            T* ga = grad_buffer(na).data();
            switch (op) {
                case ElementwiseOp::add:
                case ElementwiseOp::sub:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
                    break;
                case ElementwiseOp::mul:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * bv[ib]; });
                    break;
                case ElementwiseOp::div:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] / bv[ib]; });
                    break;
                case ElementwiseOp::power:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                        ga[ia] += g[i] * bv[ib] * std::pow(av[ia], bv[ib] - T(1));
                    });
                    break;
                default:
                    break;
            }
        }
        if (nb.requires_grad) {
            T* gb = grad_buffer(nb).data();
            switch (op) {
                case ElementwiseOp::add:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
                    break;
                case ElementwiseOp::sub:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= g[i]; });
                    break;
                case ElementwiseOp::mul:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * av[ia]; });
                    break;
                case ElementwiseOp::div:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                        gb[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]);
                    });
                    break;
                case ElementwiseOp::power:
                    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                        if (av[ia] > T(0)) {
                            gb[ib] += g[i] * y[i] * std::log(av[ia]);
                        }
                    });
                    break;
                default:
                    break;
            }
        }
    };
    return make_result<T>(plan.out, std::move(out), op_label(op), {a.node(), b.node()}, std::move(backward));
}

template <typename T>
Tensor<T> unary(ElementwiseOp op, const Tensor<T>& a) {
    const std::size_t n = a.numel();
    const T* A = a.data().data();
    std::vector<T> out(n);
    switch (op) {
        case ElementwiseOp::neg:
            for (std::size_t i = 0; i < n; ++i) out[i] = -A[i];
            break;
        case ElementwiseOp::relu:
            // NaN passes through so a poisoned batch still reaches the loss check.
            for (std::size_t i = 0; i < n; ++i) out[i] = A[i] < T(0) ? T(0) : A[i];
            break;
        case ElementwiseOp::exp:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(A[i]);
            break;
        case ElementwiseOp::log:
            for (std::size_t i = 0; i < n; ++i) {
                if (A[i] < T(0)) {
                    throw DomainError("log of negative input " + std::to_string(A[i]));
                }
                out[i] = std::log(A[i]);
            }
            break;
        case ElementwiseOp::sqrt:
            for (std::size_t i = 0; i < n; ++i) {
                if (A[i] < T(0)) {
                    throw DomainError("sqrt of negative input " + std::to_string(A[i]));
                }
                out[i] = std::sqrt(A[i]);
            }
            break;
        default:
            throw ContractError(std::string("elementwise: ") + op_label(op) + " is not unary");
    }
    auto backward = [op](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        T* ga = grad_buffer(na).data();
        const T* g = self.grad.data();
        const T* av = na.data.data();
        const T* y = self.data.data();
        const std::size_t n = self.data.size();
        switch (op) {
            case ElementwiseOp::neg:
                for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
                break;
            case ElementwiseOp::relu:
                for (std::size_t i = 0; i < n; ++i) ga[i] += av[i] > T(0) ? g[i] : T(0);
                break;
            case ElementwiseOp::exp:
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
                break;
            case ElementwiseOp::log:
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / av[i];
                break;
            case ElementwiseOp::sqrt:
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / (T(2) * y[i]);
                break;
            default:
                break;
        }
    };
    return make_result<T>(a.shape(), std::move(out), op_label(op), {a.node()}, std::move(backward));
}

// outer x n x inner decomposition around one axis.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const std::optional<Tensor<T>>& b) {
    if (is_binary(op)) {
        if (!b) {
            throw ContractError(std::string("elementwise: ") + op_label(op) + " needs a second operand");
        }
        return binary(op, a, *b);
    }
    if (b) {
        throw ContractError(std::string("elementwise: ") + op_label(op) + " takes one operand");
    }
    return unary(op, a);
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::div, a, b); }
template <typename T> Tensor<T> power(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::power, a, b); }
template <typename T> Tensor<T> neg(const Tensor<T>& a) { return unary(ElementwiseOp::neg, a); }
template <typename T> Tensor<T> relu(const Tensor<T>& a) { return unary(ElementwiseOp::relu, a); }
template <typename T> Tensor<T> exp(const Tensor<T>& a) { return unary(ElementwiseOp::exp, a); }
template <typename T> Tensor<T> log(const Tensor<T>& a) { return unary(ElementwiseOp::log, a); }
template <typename T> Tensor<T> sqrt(const Tensor<T>& a) { return unary(ElementwiseOp::sqrt, a); }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(-2);
    const std::size_t k = a.dim(-1);
    const std::size_t n = b.dim(-1);
    if (b.dim(-2) != k) {
        throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const BroadcastPlan plan = make_plan(batch_a, batch_b);

    struct Triple {
        std::size_t out, a, b;
    };
    std::vector<Triple> triples;
    triples.reserve(plan.n);
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { triples.push_back({i, ia, ib}); });

    Shape out_shape = plan.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(plan.n * m * n);
    const T* A = a.data().data();
    const T* B = b.data().data();
    for (const auto& t : triples) {
        kernels::gemm(false, false, m, n, k, A + t.a * m * k, B + t.b * k * n, out.data() + t.out * m * n, false);
    }

    auto backward = [triples = std::move(triples), m, n, k](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        const T* g = self.grad.data();
        if (na.requires_grad) {
            T* ga = grad_buffer(na).data();
            for (const auto& t : triples) {
                kernels::gemm(false, true, m, k, n, g + t.out * m * n, nb.data.data() + t.b * k * n,
                              ga + t.a * m * k, true);
            }
        }
        if (nb.requires_grad) {
            T* gb = grad_buffer(nb).data();
            for (const auto& t : triples) {
                kernels::gemm(true, false, k, n, m, na.data.data() + t.a * m * k, g + t.out * m * n,
                              gb + t.b * k * n, true);
            }
        }
    };
    return make_result<T>(std::move(out_shape), std::move(out), "matmul", {a.node(), b.node()}, std::move(backward));
}

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, int axis, bool keepdims) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    if (keepdims) {
        out_shape[ax] = 1;
    } else {
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    }
    const T* X = x.data().data();
    std::vector<T> out(s.outer * s.inner);
    std::vector<std::size_t> argmax;
    if (op == ReduceOp::max) {
        argmax.resize(out.size());
    }
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const T* base = X + o * s.n * s.inner + i;
            const std::size_t r = o * s.inner + i;
            if (op == ReduceOp::max) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < s.n; ++j) {
                    if (base[j * s.inner] > base[best * s.inner]) {
                        best = j;
                    }
                }
                out[r] = base[best * s.inner];
                argmax[r] = best;
            } else {
                T acc = T(0);
                for (std::size_t j = 0; j < s.n; ++j) {
                    acc += base[j * s.inner];
                }
                out[r] = op == ReduceOp::mean ? acc / static_cast<T>(s.n) : acc;
            }
        }
    }
    const char* label = op == ReduceOp::sum ? "sum" : op == ReduceOp::mean ? "mean" : "max";
    auto backward = [s, op, argmax = std::move(argmax)](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        T* gx = grad_buffer(nx).data();
        const T* g = self.grad.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t r = o * s.inner + i;
                T* base = gx + o * s.n * s.inner + i;
                if (op == ReduceOp::max) {
                    base[argmax[r] * s.inner] += g[r];
                } else {
                    const T v = op == ReduceOp::mean ? g[r] / static_cast<T>(s.n) : g[r];
                    for (std::size_t j = 0; j < s.n; ++j) {
                        base[j * s.inner] += v;
                    }
                }
            }
        }
    };
    return make_result<T>(std::move(out_shape), std::move(out), label, {x.node()}, std::move(backward));
}

template <typename T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdims) { return reduce(ReduceOp::sum, x, axis, keepdims); }
template <typename T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdims) { return reduce(ReduceOp::mean, x, axis, keepdims); }
template <typename T> Tensor<T> max(const Tensor<T>& x, int axis, bool keepdims) { return reduce(ReduceOp::max, x, axis, keepdims); }

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) {
        acc += v;
    }
    auto backward = [](Node<T>& self) {
        auto& gx = grad_buffer(*self.inputs[0]);
        const T g = self.grad[0];
        for (auto& v : gx) {
            v += g;
        }
    };
    return make_result<T>(Shape{}, std::vector<T>{acc}, "sum_all", {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return sum_all(x) / static_cast<T>(x.numel());
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    const T* X = x.data().data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (!std::isfinite(X[i])) {
            throw NumericError("softmax input contains non-finite values");
        }
    }
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t off = o * s.n * s.inner + i;
            T mx = X[off];
            for (std::size_t j = 1; j < s.n; ++j) {
                mx = std::max(mx, X[off + j * s.inner]);
            }
            T total = T(0);
            for (std::size_t j = 0; j < s.n; ++j) {
                const T e = std::exp(X[off + j * s.inner] - mx);
                out[off + j * s.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < s.n; ++j) {
                out[off + j * s.inner] /= total;
            }
        }
    }
    auto backward = [s](Node<T>& self) {
        T* gx = grad_buffer(*self.inputs[0]).data();
        const T* g = self.grad.data();
        const T* y = self.data.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t off = o * s.n * s.inner + i;
                T dot = T(0);
                for (std::size_t j = 0; j < s.n; ++j) {
                    dot += g[off + j * s.inner] * y[off + j * s.inner];
                }
                for (std::size_t j = 0; j < s.n; ++j) {
                    const std::size_t p = off + j * s.inner;
                    gx[p] += y[p] * (g[p] - dot);
                }
            }
        }
    };
    return make_result<T>(x.shape(), std::move(out), "softmax", {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    for (auto e : shape) {
        if (e == 0) {
            throw ShapeError("reshape target has a zero extent: " + shape_str(shape));
        }
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    auto backward = [](Node<T>& self) {
        auto& gx = grad_buffer(*self.inputs[0]);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += self.grad[i];
        }
    };
    return make_result<T>(std::move(shape), std::move(out), "reshape", {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
    const std::size_t rank = x.rank();
    if (order.size() != rank) {
        throw AxisError("permute order has " + std::to_string(order.size()) + " axes for rank " + std::to_string(rank));
    }
    std::vector<bool> used(rank, false);
    for (auto a : order) {
        if (a >= rank || used[a]) {
            throw AxisError("permute order is not a permutation");
        }
        used[a] = true;
    }
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * x.shape()[i];
    }
    Shape out_shape(rank);
    std::vector<std::size_t> src_strides(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = x.shape()[order[i]];
        src_strides[i] = in_strides[order[i]];
    }
    // src_index[i] = flat input index of output element i.
    const std::size_t n = x.numel();
    std::vector<std::size_t> src_index(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) {
        src_index[i] = src;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += src_strides[d];
            if (idx[d] < out_shape[d]) {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    const T* X = x.data().data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = X[src_index[i]];
    }
    auto backward = [src_index = std::move(src_index)](Node<T>& self) {
        T* gx = grad_buffer(*self.inputs[0]).data();
        for (std::size_t i = 0; i < src_index.size(); ++i) {
            gx[src_index[i]] += self.grad[i];
        }
    };
    return make_result<T>(std::move(out_shape), std::move(out), "permute", {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
    const std::size_t a = normalize_axis(axis_a, x.rank());
    const std::size_t b = normalize_axis(axis_b, x.rank());
    std::vector<std::size_t> order(x.rank());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::swap(order[a], order[b]);
    return permute(x, order);
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::size_t>& indices) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    if (indices.empty()) {
        throw ShapeError("index_select with no indices");
    }
    for (auto i : indices) {
        if (i >= s.n) {
            throw ShapeError("index_select index " + std::to_string(i) + " out of range for extent " +
                             std::to_string(s.n));
        }
    }
    Shape out_shape = x.shape();
    out_shape[ax] = indices.size();
    const std::size_t m = indices.size();
    const T* X = x.data().data();
    std::vector<T> out(s.outer * m * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < m; ++j) {
            std::copy_n(X + (o * s.n + indices[j]) * s.inner, s.inner, out.data() + (o * m + j) * s.inner);
        }
    }
    auto backward = [s, indices](Node<T>& self) {
        T* gx = grad_buffer(*self.inputs[0]).data();
        const T* g = self.grad.data();
        const std::size_t m = indices.size();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t j = 0; j < m; ++j) {
                T* dst = gx + (o * s.n + indices[j]) * s.inner;
                const T* src = g + (o * m + j) * s.inner;
                for (std::size_t i = 0; i < s.inner; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    };
    return make_result<T>(std::move(out_shape), std::move(out), "index_select", {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) {
        throw ShapeError("concat of zero tensors");
    }
    const std::size_t ax = normalize_axis(axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        Shape a = p.shape();
        Shape b = parts[0].shape();
        if (a.size() != b.size()) {
            throw ShapeError("concat rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
        }
        a[ax] = b[ax] = 0;
        if (a != b) {
            throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        }
        extents.push_back(p.shape()[ax]);
        out_shape[ax] += p.shape()[ax];
    }
    const AxisSplit s = split_at(out_shape, ax);
    std::vector<T> out(shape_numel(out_shape));
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const T* src = parts[p].data().data();
        const std::size_t chunk = extents[p] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(src + o * chunk, chunk, out.data() + o * s.n * s.inner + offset * s.inner);
        }
        offset += extents[p];
        inputs.push_back(parts[p].node());
    }
    auto backward = [s, extents](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
            Node<T>& in = *self.inputs[p];
            const std::size_t chunk = extents[p] * s.inner;
            if (in.requires_grad) {
                T* gx = grad_buffer(in).data();
                for (std::size_t o = 0; o < s.outer; ++o) {
                    const T* g = self.grad.data() + o * s.n * s.inner + offset * s.inner;
                    for (std::size_t i = 0; i < chunk; ++i) {
                        gx[o * chunk + i] += g[i];
                    }
                }
            }
            offset += extents[p];
        }
    };
    return make_result<T>(std::move(out_shape), std::move(out), "concat", std::move(inputs), std::move(backward));
}

#define MSPCAPS_INSTANTIATE_OPS(T)                                                                  \
    template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, const std::optional<Tensor<T>>&); \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> power(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> neg(const Tensor<T>&);                                                       \
    template Tensor<T> relu(const Tensor<T>&);                                                      \
    template Tensor<T> exp(const Tensor<T>&);                                                       \
    template Tensor<T> log(const Tensor<T>&);                                                       \
    template Tensor<T> sqrt(const Tensor<T>&);                                                      \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> reduce(ReduceOp, const Tensor<T>&, int, bool);                               \
    template Tensor<T> sum(const Tensor<T>&, int, bool);                                            \
    template Tensor<T> mean(const Tensor<T>&, int, bool);                                           \
    template Tensor<T> max(const Tensor<T>&, int, bool);                                            \
    template Tensor<T> sum_all(const Tensor<T>&);                                                   \
    template Tensor<T> mean_all(const Tensor<T>&);                                                  \
    template Tensor<T> softmax(const Tensor<T>&, int);                                              \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                  \
    template Tensor<T> transpose(const Tensor<T>&, int, int);                                       \
    template Tensor<T> index_select(const Tensor<T>&, int, const std::vector<std::size_t>&);        \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);

MSPCAPS_INSTANTIATE_OPS(float)
MSPCAPS_INSTANTIATE_OPS(double)

}  // namespace mspcaps
