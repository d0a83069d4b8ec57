#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mspcaps/capsule.hpp"
#include "mspcaps/nn.hpp"
#include "mspcaps/rng.hpp"
#include "mspcaps/tensor.hpp"

namespace mspcaps {

enum class RoutingKind { car, dr };

inline constexpr std::size_t kScales = 3;
/// Capsules produced by each per-scale branch of the dynamic-routing ablation.
inline constexpr std::size_t kDrBranchCaps = 16;

struct ModelConfig {
    std::array<std::size_t, kScales> channels{32, 64, 128};
    std::size_t convs_per_block = 2;  // entry conv plus residual modules
    std::array<std::size_t, kScales> caps_dims{8, 8, 16};
    std::size_t d_mid = 16;
    std::size_t d_out = 32;
    std::size_t patch = 4;
    bool weight_shared = true;
    std::size_t num_classes = 10;
    double dropout_rate = 0.1;
    RoutingKind routing = RoutingKind::car;
    std::size_t dr_iters = 3;
    std::array<bool, kScales> scale_mask{true, true, true};
    SoftmaxAxis softmax_axis = SoftmaxAxis::outputs;
    std::size_t input_channels = 3;
    std::size_t input_size = 32;
    // One value, or one per input channel. Applied inside the model so inputs
    // and attack budgets live in [0,1] pixel space.
    std::vector<double> input_mean{0.5};
    std::vector<double> input_std{0.5};

    static ModelConfig tiny();
    static ModelConfig large();

    /// Throws ConfigError naming the offending field.
    void validate() const;

    /// Indices of the scales feeding capsules, finest first.
    std::vector<std::size_t> active_scales() const;
};

/// Canonical JSON (sorted keys). Parsing rejects unknown keys and fills
/// missing ones from the tiny preset.
std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

/// FNV-1a over the canonical JSON.
std::uint64_t fingerprint(const ModelConfig& config);

const char* to_string(RoutingKind kind);
RoutingKind routing_from_string(const std::string& s);
const char* to_string(SoftmaxAxis axis);
SoftmaxAxis softmax_axis_from_string(const std::string& s);

/// Entry conv (3x3, BN, ReLU) followed by residual modules
/// x + ReLU(BN(conv3x3(x))).
template <typename T>
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(std::size_t in_ch, std::size_t out_ch, std::size_t stride, std::size_t convs, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x, Mode mode);
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) const;

private:
    struct Unit {
        Conv2d<T> conv;
        BatchNorm2d<T> bn;
    };
    Unit entry_;
    std::vector<Unit> modules_;
};

/// Shared trunk: block 1 keeps the input resolution, later blocks halve it.
template <typename T>
class MultiScaleBackbone {
public:
    MultiScaleBackbone() = default;
    MultiScaleBackbone(std::size_t in_ch, const std::array<std::size_t, kScales>& channels, std::size_t convs,
                       std::size_t depth, Rng& rng);

    /// Output of every built block, finest first.
    std::vector<Tensor<T>> forward(const Tensor<T>& x, Mode mode);
    void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;
    void collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) const;
    std::size_t depth() const { return blocks_.size(); }

private:
    std::vector<ResidualBlock<T>> blocks_;
};

template <typename T>
struct ForwardTrace {
    std::vector<Tensor<T>> features;
    std::vector<CapsuleSet<T>> primary;
    std::vector<CarTrace<T>> car;
    std::vector<CapsuleSet<T>> routed;  // outputs of every routing block
};

struct ParamGroup {
    std::string name;
    std::size_t count = 0;
};

struct ModelSummary {
    std::vector<ParamGroup> groups;
    std::size_t total = 0;
    std::vector<std::size_t> primary_caps;  // per active scale
    std::vector<Grid> primary_grids;
    std::vector<std::size_t> group_sizes;   // per CAR block
};

/// The full network: normalization, backbone, PatchifyCaps per active scale,
/// then two CAR blocks (or the dynamic-routing ablation).
template <typename T>
class MSPCaps {
public:
    MSPCaps(const ModelConfig& config, std::uint64_t init_seed, std::uint64_t dropout_seed = 0);

    CapsuleSet<T> forward(const Tensor<T>& pixels, Mode mode, ForwardTrace<T>* trace = nullptr);

    std::vector<Parameter<T>> parameters() const;
    std::vector<Buffer<T>> buffers() const;
    const ModelConfig& config() const { return config_; }
    Rng& dropout_rng() { return dropout_rng_; }
    ModelSummary summary() const;

private:
    ModelConfig config_;
    std::vector<std::size_t> scales_;
    Tensor<T> mean_;
    Tensor<T> std_;
    MultiScaleBackbone<T> backbone_;
    std::vector<PatchifyCaps<T>> patchify_;
    std::vector<CarBlock<T>> car_;
    std::vector<DynamicRoutingBlock<T>> dr_;
    Rng dropout_rng_;
};

template <typename T>
std::size_t count_params(const std::vector<Parameter<T>>& params);

/// Human-readable parameter and capsule report.
std::string format_summary(const ModelConfig& config, const ModelSummary& summary);

}  // namespace mspcaps
