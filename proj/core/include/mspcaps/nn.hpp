#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mspcaps/rng.hpp"
#include "mspcaps/tensor.hpp"

namespace mspcaps {

enum class Mode { train, eval };

/// A trainable tensor and the name it is stored under in checkpoints.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool decay = false;  // receives decoupled weight decay
};

/// Non-trainable state saved with the model (BatchNorm running statistics).
template <typename T>
struct Buffer {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
struct ConvParams {
    Tensor<T> weight;  // out_ch x in_ch x k x k
    std::optional<Tensor<T>> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Cross-correlation of B x C x H x W input.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p);

/// Mean over k x k windows with stride s. When k == s (patchify) the
/// spatial extents must be divisible by k.
template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t k, std::size_t s);

template <typename T>
struct BatchNormState {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Train mode normalizes with biased batch statistics and folds them into
/// the running estimates (unbiased variance); eval mode uses the running
/// estimates.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& state, Mode mode);

template <typename T>
struct LayerNormState {
    Tensor<T> gamma;
    Tensor<T> beta;
    double eps = 1e-5;
};

/// Normalizes each vector along the last dimension, then applies the affine.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormState<T>& state);

/// Inverted dropout; identity in eval mode or at rate 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng);

struct Fans {
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
};

/// Conv-style fans: dims [out, in, receptive...].
Fans conv_fans(const Shape& shape);
/// Capsule projection [n_out, n_in, d_in, d_out]: each W[j,i] maps d_in -> d_out.
Fans projection_fans(const Shape& shape);

/// Normal with std sqrt(2 / (fan_in + fan_out)).
template <typename T>
Tensor<T> init_xavier_normal(const Shape& shape, Rng& rng);
template <typename T>
Tensor<T> init_xavier_normal(const Shape& shape, Fans fans, Rng& rng);

/// Normal with std sqrt(2 / fan_in).
template <typename T>
Tensor<T> init_kaiming(const Shape& shape, Rng& rng);
template <typename T>
Tensor<T> init_kaiming(const Shape& shape, Fans fans, Rng& rng);

enum class Init { kaiming, xavier_normal };

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride, std::size_t padding,
           bool bias, Init init, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, params_); }
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    const ConvParams<T>& params() const { return params_; }
    ConvParams<T>& params() { return params_; }

private:
    ConvParams<T> params_;
};

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t channels);

    Tensor<T> forward(const Tensor<T>& x, Mode mode) { return batchnorm2d(x, state_, mode); }
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) const;
    BatchNormState<T>& state() { return state_; }

private:
    BatchNormState<T> state_;
};

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);

    Tensor<T> forward(const Tensor<T>& x) const { return layernorm(x, state_); }
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    LayerNormState<T>& state() { return state_; }

private:
    LayerNormState<T> state_;
};

}  // namespace mspcaps
