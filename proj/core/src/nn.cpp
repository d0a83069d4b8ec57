#include "mspcaps/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "kernels.hpp"
#include "mspcaps/errors.hpp"
#include "mspcaps/ops.hpp"
#include "mspcaps/parallel.hpp"

namespace mspcaps {

using detail::grad_buffer;
using detail::make_result;
using detail::Node;

namespace {

struct ConvGeometry {
    std::size_t batch, in_ch, h, w;
    std::size_t out_ch, k, stride, pad;
    std::size_t oh, ow;

    std::size_t col_rows() const { return in_ch * k * k; }
    std::size_t col_cols() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox * stride + kj - pad is in range.
std::pair<std::size_t, std::size_t> valid_span(const ConvGeometry& g, std::size_t kj) {
    const long off = static_cast<long>(kj) - static_cast<long>(g.pad);
    const long s = static_cast<long>(g.stride);
    long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long hi = (static_cast<long>(g.w) - off + s - 1) / s;
    hi = std::clamp(hi, 0L, static_cast<long>(g.ow));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Column buffers hold a chunk of images side by side: row r of the chunk
// buffer has `ld` entries and image j of the chunk starts at column j * oh * ow.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col, std::size_t ld) {
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
                const auto [lo, hi] = valid_span(g, kj);
                const long shift = static_cast<long>(kj) - static_cast<long>(g.pad);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    T* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    std::fill(dst, dst + lo, T(0));
                    if (lo < hi) {
                        const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w +
                                       static_cast<std::size_t>(static_cast<long>(lo * g.stride) + shift);
                        if (g.stride == 1) {
                            std::copy(src, src + (hi - lo), dst + lo);
                        } else {
                            for (std::size_t i = 0; i < hi - lo; ++i) dst[lo + i] = src[i * g.stride];
                        }
                    }
                    std::fill(dst + hi, dst + g.ow, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x, std::size_t ld) {
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = col + ((c * g.k + ki) * g.k + kj) * ld;
                const auto [lo, hi] = valid_span(g, kj);
                const long shift = static_cast<long>(kj) - static_cast<long>(g.pad);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        continue;
                    }
                    if (lo >= hi) {
                        continue;
                    }
                    T* dst = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w +
                             static_cast<std::size_t>(static_cast<long>(lo * g.stride) + shift);
                    const T* src = row + oy * g.ow + lo;
                    if (g.stride == 1) {
                        for (std::size_t i = 0; i < hi - lo; ++i) dst[i] += src[i];
                    } else {
                        for (std::size_t i = 0; i < hi - lo; ++i) dst[i * g.stride] += src[i];
                    }
                }
            }
        }
    }
}

// Images per GEMM. Depends only on the geometry so results do not vary with
// the thread count.
std::size_t conv_chunk(const ConvGeometry& g) {
    constexpr std::size_t kTargetCols = 1024;
    const std::size_t n = (kTargetCols + g.col_cols() - 1) / g.col_cols();
    return std::max<std::size_t>(1, std::min(n, g.batch));
}

void require_rank4(const Shape& s, const char* op) {
    if (s.size() != 4) {
        throw ShapeError(std::string(op) + " expects B x C x H x W input, got " + shape_str(s));
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
    require_rank4(x.shape(), "conv2d");
    const Shape& ws = p.weight.shape();
    if (ws.size() != 4 || ws[2] != ws[3]) {
        throw ShapeError("conv2d weight must be out x in x k x k, got " + shape_str(ws));
    }
    if (p.stride == 0) {
        throw ContractError("conv2d stride must be positive");
    }
    ConvGeometry g{};
    g.batch = x.shape()[0];
    g.in_ch = x.shape()[1];
    g.h = x.shape()[2];
    g.w = x.shape()[3];
    g.out_ch = ws[0];
    g.k = ws[2];
    g.stride = p.stride;
    g.pad = p.padding;
    if (ws[1] != g.in_ch) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " + shape_str(ws));
    }
    if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
        throw ShapeError("conv2d kernel " + std::to_string(g.k) + " larger than padded input " + shape_str(x.shape()));
    }
    if (p.bias && p.bias->shape() != Shape{g.out_ch}) {
        throw ShapeError("conv2d bias shape " + shape_str(p.bias->shape()) + " for " + std::to_string(g.out_ch) +
                         " output channels");
    }
    g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;

    const std::size_t in_size = g.in_ch * g.h * g.w;
    const std::size_t hw = g.col_cols();
    const std::size_t out_size = g.out_ch * hw;
    const std::size_t chunk = conv_chunk(g);
    const std::size_t chunks = (g.batch + chunk - 1) / chunk;
    std::vector<T> out(g.batch * out_size);
    const T* X = x.data().data();
    const T* W = p.weight.data().data();
    const T* bias = p.bias ? p.bias->data().data() : nullptr;

    parallel_for(chunks, [&](std::size_t begin, std::size_t end) {
        std::vector<T> col(g.col_rows() * chunk * hw);
        std::vector<T> res(g.out_ch * chunk * hw);
        for (std::size_t ci = begin; ci < end; ++ci) {
            const std::size_t b0 = ci * chunk;
            const std::size_t nb = std::min(chunk, g.batch - b0);
            const std::size_t ld = nb * hw;
            for (std::size_t j = 0; j < nb; ++j) {
                im2col(X + (b0 + j) * in_size, g, col.data() + j * hw, ld);
            }
            kernels::gemm(false, false, g.out_ch, ld, g.col_rows(), W, col.data(), res.data(), false);
            for (std::size_t j = 0; j < nb; ++j) {
                T* dst = out.data() + (b0 + j) * out_size;
                for (std::size_t o = 0; o < g.out_ch; ++o) {
                    const T* src = res.data() + o * ld + j * hw;
                    const T bo = bias ? bias[o] : T(0);
                    for (std::size_t i = 0; i < hw; ++i) {
                        dst[o * hw + i] = bias ? src[i] + bo : src[i];
                    }
                }
            }
        }
    });

    std::vector<std::shared_ptr<Node<T>>> inputs{x.node(), p.weight.node()};
    if (p.bias) {
        inputs.push_back(p.bias->node());
    }
    auto backward = [g, in_size, out_size, hw, chunk, chunks](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& nw = *self.inputs[1];
        const T* gy = self.grad.data();
        const T* X = nx.data.data();
        const T* W = nw.data.data();
        T* gx = nx.requires_grad ? grad_buffer(nx).data() : nullptr;
        T* gw = nw.requires_grad ? grad_buffer(nw).data() : nullptr;
        if (gx || gw) {
            std::vector<T> col(g.col_rows() * chunk * hw);
            std::vector<T> gyc(g.out_ch * chunk * hw);
            // Chunks run in order so the weight gradient sums in a fixed order.
            for (std::size_t ci = 0; ci < chunks; ++ci) {
                const std::size_t b0 = ci * chunk;
                const std::size_t nb = std::min(chunk, g.batch - b0);
                const std::size_t ld = nb * hw;
                for (std::size_t j = 0; j < nb; ++j) {
                    const T* src = gy + (b0 + j) * out_size;
                    for (std::size_t o = 0; o < g.out_ch; ++o) {
                        std::copy(src + o * hw, src + (o + 1) * hw, gyc.data() + o * ld + j * hw);
                    }
                }
                if (gw) {
                    for (std::size_t j = 0; j < nb; ++j) {
                        im2col(X + (b0 + j) * in_size, g, col.data() + j * hw, ld);
                    }
                    kernels::gemm(false, true, g.out_ch, g.col_rows(), ld, gyc.data(), col.data(), gw, true);
                }
                if (gx) {
                    kernels::gemm(true, false, g.col_rows(), ld, g.out_ch, W, gyc.data(), col.data(), false);
                    for (std::size_t j = 0; j < nb; ++j) {
                        col2im_add(col.data() + j * hw, g, gx + (b0 + j) * in_size, ld);
                    }
                }
            }
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            T* gb = grad_buffer(*self.inputs[2]).data();
            for (std::size_t b = 0; b < g.batch; ++b) {
                for (std::size_t o = 0; o < g.out_ch; ++o) {
                    const T* row = gy + b * out_size + o * hw;
                    T acc = T(0);
                    for (std::size_t i = 0; i < hw; ++i) {
                        acc += row[i];
                    }
                    gb[o] += acc;
                }
            }
        }
    };
    return make_result<T>(Shape{g.batch, g.out_ch, g.oh, g.ow}, std::move(out), "conv2d", std::move(inputs),
                          std::move(backward));
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t k, std::size_t s) {
    require_rank4(x.shape(), "avgpool2d");
    if (k == 0 || s == 0) {
        throw ContractError("avgpool2d kernel and stride must be positive");
    }
    const std::size_t batch = x.shape()[0];
    const std::size_t ch = x.shape()[1];
    const std::size_t h = x.shape()[2];
    const std::size_t w = x.shape()[3];
    if (k == s && (h % k != 0 || w % k != 0)) {
        throw ShapeError("patch size p=" + std::to_string(k) + " does not divide feature map H=" + std::to_string(h) +
                         ", W=" + std::to_string(w));
    }
    if (h < k || w < k) {
        throw ShapeError("avgpool2d window larger than input " + shape_str(x.shape()));
    }
    const std::size_t oh = (h - k) / s + 1;
    const std::size_t ow = (w - k) / s + 1;
    const T scale = T(1) / static_cast<T>(k * k);
    const T* X = x.data().data();
    std::vector<T> out(batch * ch * oh * ow);
    for (std::size_t p = 0; p < batch * ch; ++p) {
        const T* plane = X + p * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = T(0);
                for (std::size_t i = 0; i < k; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        acc += plane[(oy * s + i) * w + ox * s + j];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    auto backward = [=](Node<T>& self) {
        T* gx = grad_buffer(*self.inputs[0]).data();
        const T* g = self.grad.data();
        for (std::size_t p = 0; p < batch * ch; ++p) {
            T* plane = gx + p * h * w;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const T v = g[(p * oh + oy) * ow + ox] * scale;
                    for (std::size_t i = 0; i < k; ++i) {
                        for (std::size_t j = 0; j < k; ++j) {
                            plane[(oy * s + i) * w + ox * s + j] += v;
                        }
                    }
                }
            }
        }
    };
    return make_result<T>(Shape{batch, ch, oh, ow}, std::move(out), "avgpool2d", {x.node()}, std::move(backward));
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& st, Mode mode) {
    require_rank4(x.shape(), "batchnorm2d");
    const std::size_t batch = x.shape()[0];
    const std::size_t ch = x.shape()[1];
    const std::size_t hw = x.shape()[2] * x.shape()[3];
    if (st.gamma.numel() != ch || st.beta.numel() != ch || st.running_mean.numel() != ch ||
        st.running_var.numel() != ch) {
        throw ShapeError("batchnorm2d state has wrong channel count for input " + shape_str(x.shape()));
    }
    if (mode == Mode::train && batch < 2) {
        throw ContractError("batchnorm2d in train mode needs a batch of at least 2");
    }
    const std::size_t count = batch * hw;
    const T* X = x.data().data();
    const T* gamma = st.gamma.data().data();
    const T* beta = st.beta.data().data();
    std::vector<T> mean(ch);
    std::vector<T> inv_std(ch);

    if (mode == Mode::train) {
        T* rm = st.running_mean.mutable_data().data();
        T* rv = st.running_var.mutable_data().data();
        for (std::size_t c = 0; c < ch; ++c) {
            double acc = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = X + (b * ch + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(count);
            double sq = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = X + (b * ch + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(count);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + st.eps));
            const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
            rm[c] = static_cast<T>((1.0 - st.momentum) * rm[c] + st.momentum * mu);
            rv[c] = static_cast<T>((1.0 - st.momentum) * rv[c] + st.momentum * unbiased);
        }
    } else {
        const T* rm = st.running_mean.data().data();
        const T* rv = st.running_var.data().data();
        for (std::size_t c = 0; c < ch; ++c) {
            mean[c] = rm[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + st.eps));
        }
    }

    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
            const T* p = X + (b * ch + c) * hw;
            T* q = out.data() + (b * ch + c) * hw;
            const T m = mean[c];
            const T is = inv_std[c];
            for (std::size_t i = 0; i < hw; ++i) {
                q[i] = gamma[c] * ((p[i] - m) * is) + beta[c];
            }
        }
    }

    const bool batch_stats = mode == Mode::train;
    auto backward = [=, mean = std::move(mean), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& ng = *self.inputs[1];
        Node<T>& nb = *self.inputs[2];
        const T* X = nx.data.data();
        const T* gamma = ng.data.data();
        const T* gy = self.grad.data();
        for (std::size_t c = 0; c < ch; ++c) {
            double sum_g = 0.0;
            double sum_gx = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = X + (b * ch + c) * hw;
                const T* g = gy + (b * ch + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum_g += g[i];
                    sum_gx += static_cast<double>(g[i]) * ((p[i] - mean[c]) * inv_std[c]);
                }
            }
            if (ng.requires_grad) grad_buffer(ng)[c] += static_cast<T>(sum_gx);
            if (nb.requires_grad) grad_buffer(nb)[c] += static_cast<T>(sum_g);
            if (!nx.requires_grad) continue;
            T* gx = grad_buffer(nx).data();
            const T scale = gamma[c] * inv_std[c];
            if (batch_stats) {
                const T mg = static_cast<T>(sum_g / static_cast<double>(count));
                const T mgx = static_cast<T>(sum_gx / static_cast<double>(count));
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* p = X + (b * ch + c) * hw;
                    const T* g = gy + (b * ch + c) * hw;
                    T* d = gx + (b * ch + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T xhat = (p[i] - mean[c]) * inv_std[c];
                        d[i] += scale * (g[i] - mg - xhat * mgx);
                    }
                }
            } else {
                for (std::size_t b = 0; b < batch; ++b) {
                    const T* g = gy + (b * ch + c) * hw;
                    T* d = gx + (b * ch + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        d[i] += scale * g[i];
                    }
                }
            }
        }
    };
    return make_result<T>(x.shape(), std::move(out), "batchnorm2d", {x.node(), st.gamma.node(), st.beta.node()},
                          std::move(backward));
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormState<T>& st) {
    const std::size_t d = x.dim(-1);
    if (st.gamma.numel() != d || st.beta.numel() != d) {
        throw ShapeError("layernorm affine size does not match last dim of " + shape_str(x.shape()));
    }
    const Tensor<T> centered = x - mean(x, -1, true);
    const Tensor<T> var = mean(centered * centered, -1, true);
    const Tensor<T> normed = centered / sqrt(var + static_cast<T>(st.eps));
    return normed * st.gamma + st.beta;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
    if (!(rate >= 0.0) || rate >= 1.0) {
        throw ContractError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (mode == Mode::eval || rate == 0.0) {
        return x;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) {
        m = uniform01(rng) < rate ? T(0) : keep_scale;
    }
    std::vector<T> out(x.numel());
    const T* X = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = X[i] * mask[i];
    }
    auto backward = [mask = std::move(mask)](Node<T>& self) {
        T* gx = grad_buffer(*self.inputs[0]).data();
        for (std::size_t i = 0; i < mask.size(); ++i) {
            gx[i] += self.grad[i] * mask[i];
        }
    };
    return make_result<T>(x.shape(), std::move(out), "dropout", {x.node()}, std::move(backward));
}

Fans conv_fans(const Shape& shape) {
    if (shape.size() < 2) {
        throw ContractError("fan computation needs rank >= 2, got " + shape_str(shape));
    }
    std::size_t receptive = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
    return {shape[1] * receptive, shape[0] * receptive};
}

Fans projection_fans(const Shape& shape) {
    if (shape.size() != 4) {
        throw ContractError("projection tensor must be n_out x n_in x d_in x d_out, got " + shape_str(shape));
    }
    return {shape[2], shape[3]};
}

namespace {
template <typename T>
Tensor<T> normal_tensor(const Shape& shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& e : v) e = static_cast<T>(dist(rng));
    return Tensor<T>(shape, std::move(v), true);
}
}  // namespace

template <typename T>
Tensor<T> init_xavier_normal(const Shape& shape, Fans fans, Rng& rng) {
    if (fans.fan_in == 0 || fans.fan_out == 0) {
        throw ContractError("xavier init with zero fan");
    }
    return normal_tensor<T>(shape, std::sqrt(2.0 / static_cast<double>(fans.fan_in + fans.fan_out)), rng);
}

template <typename T>
Tensor<T> init_xavier_normal(const Shape& shape, Rng& rng) {
    return init_xavier_normal<T>(shape, conv_fans(shape), rng);
}

template <typename T>
Tensor<T> init_kaiming(const Shape& shape, Fans fans, Rng& rng) {
    if (fans.fan_in == 0) {
        throw ContractError("kaiming init with zero fan_in");
    }
    return normal_tensor<T>(shape, std::sqrt(2.0 / static_cast<double>(fans.fan_in)), rng);
}

template <typename T>
Tensor<T> init_kaiming(const Shape& shape, Rng& rng) {
    return init_kaiming<T>(shape, conv_fans(shape), rng);
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                  std::size_t padding, bool bias, Init init, Rng& rng) {
    const Shape shape{out_ch, in_ch, kernel, kernel};
    params_.weight = init == Init::kaiming ? init_kaiming<T>(shape, rng) : init_xavier_normal<T>(shape, rng);
    if (bias) {
        params_.bias = Tensor<T>::zeros({out_ch}, true);
    }
    params_.stride = stride;
    params_.padding = padding;
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    out.push_back({prefix + ".weight", params_.weight, true});
    if (params_.bias) {
        out.push_back({prefix + ".bias", *params_.bias, false});
    }
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels) {
    state_.gamma = Tensor<T>::ones({channels}, true);
    state_.beta = Tensor<T>::zeros({channels}, true);
    state_.running_mean = Tensor<T>::zeros({channels});
    state_.running_var = Tensor<T>::ones({channels});
}

template <typename T>
void BatchNorm2d<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    out.push_back({prefix + ".gamma", state_.gamma, false});
    out.push_back({prefix + ".beta", state_.beta, false});
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) const {
    out.push_back({prefix + ".running_mean", state_.running_mean});
    out.push_back({prefix + ".running_var", state_.running_var});
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t dim) {
    state_.gamma = Tensor<T>::ones({dim}, true);
    state_.beta = Tensor<T>::zeros({dim}, true);
}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    out.push_back({prefix + ".gamma", state_.gamma, false});
    out.push_back({prefix + ".beta", state_.beta, false});
}

#define MSPCAPS_INSTANTIATE_NN(T)                                                   \
    template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);              \
    template Tensor<T> avgpool2d(const Tensor<T>&, std::size_t, std::size_t);       \
    template Tensor<T> batchnorm2d(const Tensor<T>&, BatchNormState<T>&, Mode);     \
    template Tensor<T> layernorm(const Tensor<T>&, const LayerNormState<T>&);       \
    template Tensor<T> dropout(const Tensor<T>&, double, Mode, Rng&);               \
    template Tensor<T> init_xavier_normal(const Shape&, Rng&);                      \
    template Tensor<T> init_xavier_normal(const Shape&, Fans, Rng&);                \
    template Tensor<T> init_kaiming(const Shape&, Rng&);                            \
    template Tensor<T> init_kaiming(const Shape&, Fans, Rng&);                      \
    template class Conv2d<T>;                                                       \
    template class BatchNorm2d<T>;                                                  \
    template class LayerNorm<T>;

MSPCAPS_INSTANTIATE_NN(float)
MSPCAPS_INSTANTIATE_NN(double)

}  // namespace mspcaps
