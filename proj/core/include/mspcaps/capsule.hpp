#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mspcaps/nn.hpp"
#include "mspcaps/rng.hpp"
#include "mspcaps/tensor.hpp"

namespace mspcaps {

struct Grid {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t size() const { return h * w; }
    bool operator==(const Grid&) const = default;
};

/// Capsules of one batch: caps is B x n x d. Patchified sets carry the grid
/// they came from (n == grid.h * grid.w); routed outputs may not.
template <typename T>
struct CapsuleSet {
    Tensor<T> caps;
    std::optional<Grid> grid;
    int scale_id = -1;

    std::size_t batch() const { return caps.dim(0); }
    std::size_t count() const { return caps.dim(1); }
    std::size_t dim() const { return caps.dim(2); }
};

/// Fixed in the squared-norm denominator so the zero vector maps to zero.
inline constexpr double kSquashEps = 1e-8;

/// v * |v|^2 / ((1 + |v|^2) * sqrt(|v|^2 + eps)) along the last axis.
template <typename T>
Tensor<T> squash(const Tensor<T>& v);

/// Spatial correspondence between a fine grid and a coarser one.
struct GroupMap {
    std::size_t groups = 0;      // coarse capsules k
    std::size_t group_size = 0;  // s
    std::vector<std::size_t> group_of;   // fine index -> k
    std::vector<std::size_t> within_of;  // fine index -> m
    std::vector<std::size_t> order;      // k * s + m -> fine index
};

/// Fine cell (r, c) belongs to coarse group (r / bh) * w2 + c / bw, where
/// bh x bw = (h1/h2) x (w1/w2), and is numbered row-major inside its block.
GroupMap group_map(Grid fine, Grid coarse);

enum class SoftmaxAxis {
    outputs,  // each coarse capsule's coefficients sum to 1 over j
    inputs,   // each output's coefficients sum to 1 over k
};

template <typename T>
struct CarParams {
    std::optional<Tensor<T>> W1;  // n_out x n_in1 x d_in1 x d_out, absent when shared
    Tensor<T> W2;                 // n_out x n_in2 x d_in2 x d_out
    double dropout_rate = 0.0;
    SoftmaxAxis softmax_axis = SoftmaxAxis::outputs;

    bool shared() const { return !W1.has_value(); }
    std::size_t n_out() const { return W2.dim(0); }
    std::size_t d_out() const { return W2.dim(3); }
};

/// Intermediate quantities of one CAR evaluation.
template <typename T>
struct CarTrace {
    Tensor<T> votes_fine;    // B x n_out x k x s x d_out
    Tensor<T> votes_coarse;  // B x n_out x k x d_out
    Tensor<T> agreement;     // B x n_out x k
    Tensor<T> coupling;      // B x n_out x k, before dropout
};

/// Cross-agreement routing of fine capsules u1 against coarse capsules u2.
/// Both sets need grids. The output carries u2's grid when n_out equals the
/// number of coarse capsules, so it can feed another CAR block.
template <typename T>
CapsuleSet<T> car_forward(const CapsuleSet<T>& u1, const CapsuleSet<T>& u2, const CarParams<T>& params,
                          Mode mode, Rng& rng, CarTrace<T>* trace = nullptr);

/// Routing-by-agreement over votes W[j,i] u_i, with logits starting at zero.
template <typename T>
CapsuleSet<T> dynamic_routing(const CapsuleSet<T>& u, const Tensor<T>& W, std::size_t iters);

struct MarginLossParams {
    double m_plus = 0.9;
    double m_minus = 0.1;
    double lambda = 0.5;
};

/// Per-class hinge-squared loss on capsule norms, summed over classes and
/// averaged over the batch.
template <typename T>
Tensor<T> margin_loss(const CapsuleSet<T>& class_caps, const std::vector<int>& labels,
                      const MarginLossParams& mp = {});

/// Index of the longest capsule per batch item; ties go to the lower index.
template <typename T>
std::vector<int> predict(const CapsuleSet<T>& class_caps);

/// Euclidean norms, B x K.
template <typename T>
std::vector<T> capsule_norms(const CapsuleSet<T>& caps);

/// avgpool(p) -> 1x1 conv -> row-major flatten -> + E_pos -> LayerNorm.
template <typename T>
class PatchifyCaps {
public:
    PatchifyCaps() = default;
    PatchifyCaps(std::size_t in_ch, std::size_t dim, std::size_t patch, Grid grid, int scale_id, Rng& rng);

    CapsuleSet<T> forward(const Tensor<T>& features) const;
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;

    Grid grid() const { return grid_; }
    std::size_t dim() const { return dim_; }
    std::size_t patch() const { return patch_; }
    Conv2d<T>& conv() { return conv_; }
    Tensor<T>& pos() { return pos_; }
    LayerNorm<T>& norm() { return norm_; }

private:
    std::size_t dim_ = 0;
    std::size_t patch_ = 1;
    Grid grid_;
    int scale_id_ = -1;
    Conv2d<T> conv_;
    Tensor<T> pos_;
    LayerNorm<T> norm_;
};

template <typename T>
class CarBlock {
public:
    CarBlock() = default;
    /// Projections are Kaiming-initialized; W1 is created only when unshared.
    CarBlock(std::size_t n_out, std::size_t n_in1, std::size_t d_in1, std::size_t n_in2, std::size_t d_in2,
             std::size_t d_out, bool shared, double dropout_rate, SoftmaxAxis axis, Rng& rng);

    CapsuleSet<T> forward(const CapsuleSet<T>& u1, const CapsuleSet<T>& u2, Mode mode, Rng& rng,
                          CarTrace<T>* trace = nullptr) const {
        return car_forward(u1, u2, params_, mode, rng, trace);
    }
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    CarParams<T>& params() { return params_; }
    const CarParams<T>& params() const { return params_; }

private:
    CarParams<T> params_;
};

template <typename T>
class DynamicRoutingBlock {
public:
    DynamicRoutingBlock() = default;
    DynamicRoutingBlock(std::size_t n_out, std::size_t n_in, std::size_t d_in, std::size_t d_out, std::size_t iters,
                        Rng& rng);

    CapsuleSet<T> forward(const CapsuleSet<T>& u) const { return dynamic_routing(u, W_, iters_); }
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    Tensor<T>& weight() { return W_; }
    std::size_t iters() const { return iters_; }

private:
    Tensor<T> W_;
    std::size_t iters_ = 3;
};

}  // namespace mspcaps
