#include "mspcaps/model.hpp"

#include <map>
#include <sstream>

#include <json.hpp>

#include "mspcaps/errors.hpp"
#include "mspcaps/ops.hpp"

namespace mspcaps {

using json = nlohmann::json;

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::large() {
    ModelConfig c;
    c.channels = {128, 256, 512};
    c.convs_per_block = 3;
    c.caps_dims = {16, 32, 64};
    c.d_mid = 64;
    c.d_out = 128;
    c.weight_shared = false;
    return c;
}

std::vector<std::size_t> ModelConfig::active_scales() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < kScales; ++i) {
        if (scale_mask[i]) out.push_back(i);
    }
    return out;
}

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
    if (!ok) {
        throw ConfigError("model." + field + ": " + why);
    }
}

}  // namespace

void ModelConfig::validate() const {
    for (std::size_t i = 0; i < kScales; ++i) {
        require(channels[i] > 0, "channels", "must be positive");
        require(caps_dims[i] > 0, "caps_dims", "must be positive");
    }
    require(convs_per_block >= 1, "convs_per_block", "must be >= 1");
    require(d_mid > 0, "d_mid", "must be positive");
    require(d_out > 0, "d_out", "must be positive");
    require(patch > 0, "patch", "must be positive");
    require(num_classes >= 2, "num_classes", "must be >= 2");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "dropout_rate", "must lie in [0, 1)");
    require(dr_iters >= 1, "dr_iters", "must be >= 1");
    require(input_channels >= 1, "input_channels", "must be positive");
    require(input_size >= 1, "input_size", "must be positive");
    require(input_mean.size() == 1 || input_mean.size() == input_channels, "input_mean",
            "needs 1 or input_channels values");
    require(input_std.size() == 1 || input_std.size() == input_channels, "input_std",
            "needs 1 or input_channels values");
    for (double s : input_std) require(s > 0.0, "input_std", "must be positive");
    const auto scales = active_scales();
    require(!scales.empty(), "scale_mask", "at least one scale must be enabled");
    std::size_t extent = input_size;
    std::vector<std::size_t> grids;
    for (std::size_t s = 0; s <= scales.back(); ++s) {
        if (s > 0) extent = (extent + 1) / 2;  // stride-2 entry conv
        if (!scale_mask[s]) continue;
        require(extent % patch == 0, "patch",
                "patch size p=" + std::to_string(patch) + " does not divide feature map H=" +
                    std::to_string(extent) + ", W=" + std::to_string(extent));
        grids.push_back(extent / patch);
    }
    if (routing == RoutingKind::car) {
        for (std::size_t i = 1; i < grids.size(); ++i) {
            require(grids[i - 1] % grids[i] == 0, "patch",
                    "fine capsule grid " + std::to_string(grids[i - 1]) + " is not a multiple of the coarse grid " +
                        std::to_string(grids[i]));
        }
    }
    if (weight_shared && routing == RoutingKind::car) {
        if (scales.size() >= 2) {
            require(caps_dims[0] == caps_dims[1], "caps_dims",
                    "shared weights need equal dims for the first CAR block inputs");
        }
        if (scales.size() == 3) {
            require(d_mid == caps_dims[2], "d_mid", "shared weights need d_mid equal to the coarsest capsule dim");
        }
    }
}

const char* to_string(RoutingKind kind) { return kind == RoutingKind::car ? "car" : "dr"; }

RoutingKind routing_from_string(const std::string& s) {
    if (s == "car") return RoutingKind::car;
    if (s == "dr") return RoutingKind::dr;
    throw ConfigError("routing must be car or dr, got '" + s + "'");
}

const char* to_string(SoftmaxAxis axis) { return axis == SoftmaxAxis::outputs ? "outputs" : "inputs"; }

SoftmaxAxis softmax_axis_from_string(const std::string& s) {
    if (s == "outputs") return SoftmaxAxis::outputs;
    if (s == "inputs") return SoftmaxAxis::inputs;
    throw ConfigError("softmax_axis must be outputs or inputs, got '" + s + "'");
}

std::string to_json(const ModelConfig& c) {
    json j;
    j["channels"] = c.channels;
    j["convs_per_block"] = c.convs_per_block;
    j["caps_dims"] = c.caps_dims;
    j["d_mid"] = c.d_mid;
    j["d_out"] = c.d_out;
    j["patch"] = c.patch;
    j["weight_shared"] = c.weight_shared;
    j["num_classes"] = c.num_classes;
    j["dropout_rate"] = c.dropout_rate;
    j["routing"] = to_string(c.routing);
    j["dr_iters"] = c.dr_iters;
    j["scale_mask"] = c.scale_mask;
    j["softmax_axis"] = to_string(c.softmax_axis);
    j["input_channels"] = c.input_channels;
    j["input_size"] = c.input_size;
    j["input_mean"] = c.input_mean;
    j["input_std"] = c.input_std;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("model config must be a JSON object");
    }
    ModelConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& key = it.key();
        const json& v = it.value();
        try {
            if (key == "channels") c.channels = v.get<std::array<std::size_t, kScales>>();
            else if (key == "convs_per_block") c.convs_per_block = v.get<std::size_t>();
            else if (key == "caps_dims") c.caps_dims = v.get<std::array<std::size_t, kScales>>();
            else if (key == "d_mid") c.d_mid = v.get<std::size_t>();
            else if (key == "d_out") c.d_out = v.get<std::size_t>();
            else if (key == "patch") c.patch = v.get<std::size_t>();
            else if (key == "weight_shared") c.weight_shared = v.get<bool>();
            else if (key == "num_classes") c.num_classes = v.get<std::size_t>();
            else if (key == "dropout_rate") c.dropout_rate = v.get<double>();
            else if (key == "routing") c.routing = routing_from_string(v.get<std::string>());
            else if (key == "dr_iters") c.dr_iters = v.get<std::size_t>();
            else if (key == "scale_mask") c.scale_mask = v.get<std::array<bool, kScales>>();
            else if (key == "softmax_axis") c.softmax_axis = softmax_axis_from_string(v.get<std::string>());
            else if (key == "input_channels") c.input_channels = v.get<std::size_t>();
            else if (key == "input_size") c.input_size = v.get<std::size_t>();
            else if (key == "input_mean") c.input_mean = v.get<std::vector<double>>();
            else if (key == "input_std") c.input_std = v.get<std::vector<double>>();
            else throw ConfigError("model: unknown key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("model." + key + ": " + e.what());
        }
    }
    return c;
}

std::uint64_t fingerprint(const ModelConfig& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : to_json(config)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
ResidualBlock<T>::ResidualBlock(std::size_t in_ch, std::size_t out_ch, std::size_t stride, std::size_t convs,
                                Rng& rng) {
    entry_.conv = Conv2d<T>(in_ch, out_ch, 3, stride, 1, false, Init::kaiming, rng);
    entry_.bn = BatchNorm2d<T>(out_ch);
    for (std::size_t i = 1; i < convs; ++i) {
        Unit u;
        u.conv = Conv2d<T>(out_ch, out_ch, 3, 1, 1, false, Init::kaiming, rng);
        u.bn = BatchNorm2d<T>(out_ch);
        modules_.push_back(std::move(u));
    }
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, Mode mode) {
    Tensor<T> h = relu(entry_.bn.forward(entry_.conv.forward(x), mode));
    for (auto& m : modules_) {
        h = h + relu(m.bn.forward(m.conv.forward(h), mode));
    }
    return h;
}

template <typename T>
void ResidualBlock<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    entry_.conv.collect(prefix + ".entry.conv", out);
    entry_.bn.collect(prefix + ".entry.bn", out);
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        const std::string p = prefix + ".res" + std::to_string(i + 1);
        modules_[i].conv.collect(p + ".conv", out);
        modules_[i].bn.collect(p + ".bn", out);
    }
}

template <typename T>
void ResidualBlock<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) const {
    entry_.bn.collect_buffers(prefix + ".entry.bn", out);
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        modules_[i].bn.collect_buffers(prefix + ".res" + std::to_string(i + 1) + ".bn", out);
    }
}

template <typename T>
MultiScaleBackbone<T>::MultiScaleBackbone(std::size_t in_ch, const std::array<std::size_t, kScales>& channels,
                                          std::size_t convs, std::size_t depth, Rng& rng) {
    std::size_t prev = in_ch;
    for (std::size_t i = 0; i < depth; ++i) {
        blocks_.emplace_back(prev, channels[i], i == 0 ? 1 : 2, convs, rng);
        prev = channels[i];
    }
}

template <typename T>
std::vector<Tensor<T>> MultiScaleBackbone<T>::forward(const Tensor<T>& x, Mode mode) {
    std::vector<Tensor<T>> out;
    Tensor<T> h = x;
    for (auto& b : blocks_) {
        h = b.forward(h, mode);
        out.push_back(h);
    }
    return out;
}

template <typename T>
void MultiScaleBackbone<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].collect(prefix + ".block" + std::to_string(i + 1), out);
    }
}

template <typename T>
void MultiScaleBackbone<T>::collect_buffers(const std::string& prefix, std::vector<Buffer<T>>& out) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].collect_buffers(prefix + ".block" + std::to_string(i + 1), out);
    }
}

namespace {

template <typename T>
Tensor<T> channel_tensor(const std::vector<double>& values, std::size_t channels) {
    std::vector<T> v(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        v[c] = static_cast<T>(values.size() == 1 ? values[0] : values[c]);
    }
    return Tensor<T>({channels, 1, 1}, std::move(v));
}

Grid scale_grid(const ModelConfig& c, std::size_t scale) {
    const std::size_t side = c.input_size >> scale;
    if (side == 0 || (c.input_size % (std::size_t{1} << scale)) != 0) {
        throw ShapeError("input size " + std::to_string(c.input_size) + " cannot be halved " + std::to_string(scale) +
                         " times");
    }
    if (side % c.patch != 0) {
        throw ShapeError("patch size p=" + std::to_string(c.patch) + " does not divide feature map H=" +
                         std::to_string(side) + ", W=" + std::to_string(side));
    }
    return Grid{side / c.patch, side / c.patch};
}

}  // namespace

template <typename T>
MSPCaps<T>::MSPCaps(const ModelConfig& config, std::uint64_t init_seed, std::uint64_t dropout_seed)
    : config_(config), dropout_rng_(dropout_seed) {
    config_.validate();
    scales_ = config_.active_scales();
    mean_ = channel_tensor<T>(config_.input_mean, config_.input_channels);
    std_ = channel_tensor<T>(config_.input_std, config_.input_channels);

    Rng rng(init_seed);
    backbone_ = MultiScaleBackbone<T>(config_.input_channels, config_.channels, config_.convs_per_block,
                                      scales_.back() + 1, rng);

    // Capsule dims follow the position among active scales, so ablations keep
    // the dimension layout of the full model's first CAR block.
    std::vector<std::size_t> counts;
    std::vector<std::size_t> dims;
    for (std::size_t pos = 0; pos < scales_.size(); ++pos) {
        const std::size_t s = scales_[pos];
        const Grid g = scale_grid(config_, s);
        patchify_.emplace_back(config_.channels[s], config_.caps_dims[pos], config_.patch, g, static_cast<int>(s),
                               rng);
        counts.push_back(g.size());
        dims.push_back(config_.caps_dims[pos]);
    }

    const bool shared = config_.weight_shared;
    const double drop = config_.dropout_rate;
    const SoftmaxAxis axis = config_.softmax_axis;
    const std::size_t K = config_.num_classes;
    if (config_.routing == RoutingKind::car) {
        if (scales_.size() == 3) {
            car_.emplace_back(counts[1], counts[0], dims[0], counts[1], dims[1], config_.d_mid, shared, drop, axis, rng);
            car_.emplace_back(K, counts[1], config_.d_mid, counts[2], dims[2], config_.d_out, shared, drop, axis, rng);
        } else {
            // Two scales: fine against coarse, then the fused set against itself.
            // One scale: the set is routed against itself twice.
            const std::size_t coarse = scales_.size() == 2 ? 1 : 0;
            const std::size_t n_mid = counts[coarse];
            car_.emplace_back(n_mid, counts[0], dims[0], n_mid, dims[coarse], config_.d_mid, shared, drop, axis, rng);
            car_.emplace_back(K, n_mid, config_.d_mid, n_mid, config_.d_mid, config_.d_out, shared, drop, axis, rng);
        }
    } else {
        for (std::size_t pos = 0; pos < scales_.size(); ++pos) {
            dr_.emplace_back(kDrBranchCaps, counts[pos], dims[pos], config_.d_mid, config_.dr_iters, rng);
        }
        dr_.emplace_back(K, kDrBranchCaps * scales_.size(), config_.d_mid, config_.d_out, config_.dr_iters, rng);
    }
}

template <typename T>
CapsuleSet<T> MSPCaps<T>::forward(const Tensor<T>& pixels, Mode mode, ForwardTrace<T>* trace) {
    const Shape& s = pixels.shape();
    if (s.size() != 4 || s[1] != config_.input_channels || s[2] != config_.input_size ||
        s[3] != config_.input_size) {
        throw ShapeError("model expects B x " + std::to_string(config_.input_channels) + " x " +
                         std::to_string(config_.input_size) + " x " + std::to_string(config_.input_size) +
                         " input, got " + shape_str(s));
    }
    const Tensor<T> x = (pixels - mean_) / std_;
    const std::vector<Tensor<T>> features = backbone_.forward(x, mode);

    std::vector<CapsuleSet<T>> primary;
    for (std::size_t pos = 0; pos < scales_.size(); ++pos) {
        primary.push_back(patchify_[pos].forward(features[scales_[pos]]));
    }
    if (trace) {
        trace->features = features;
        trace->primary = primary;
        trace->car.clear();
        trace->routed.clear();
    }

    if (config_.routing == RoutingKind::car) {
        const CapsuleSet<T>& fine = primary[0];
        const CapsuleSet<T>& coarse = primary.size() >= 2 ? primary[1] : primary[0];
        CarTrace<T> t1;
        CarTrace<T> t2;
        const CapsuleSet<T> mid = car_[0].forward(fine, coarse, mode, dropout_rng_, trace ? &t1 : nullptr);
        const CapsuleSet<T>& last = primary.size() == 3 ? primary[2] : mid;
        CapsuleSet<T> out = car_[1].forward(mid, last, mode, dropout_rng_, trace ? &t2 : nullptr);
        if (trace) {
            trace->car = {t1, t2};
            trace->routed = {mid, out};
        }
        return out;
    }

    std::vector<Tensor<T>> branches;
    for (std::size_t pos = 0; pos < scales_.size(); ++pos) {
        CapsuleSet<T> b = dr_[pos].forward(primary[pos]);
        if (trace) trace->routed.push_back(b);
        branches.push_back(b.caps);
    }
    const CapsuleSet<T> joined{concat(branches, 1), std::nullopt, -1};
    CapsuleSet<T> out = dr_.back().forward(joined);
    if (trace) trace->routed.push_back(out);
    return out;
}

template <typename T>
std::vector<Parameter<T>> MSPCaps<T>::parameters() const {
    std::vector<Parameter<T>> out;
    backbone_.collect("backbone", out);
    for (std::size_t pos = 0; pos < patchify_.size(); ++pos) {
        patchify_[pos].collect("patchify" + std::to_string(scales_[pos] + 1), out);
    }
    for (std::size_t i = 0; i < car_.size(); ++i) {
        car_[i].collect("car" + std::to_string(i + 1), out);
    }
    for (std::size_t i = 0; i < dr_.size(); ++i) {
        const bool last = i + 1 == dr_.size();
        dr_[i].collect(last ? std::string("dr_final") : "dr" + std::to_string(scales_[i] + 1), out);
    }
    return out;
}

template <typename T>
std::vector<Buffer<T>> MSPCaps<T>::buffers() const {
    std::vector<Buffer<T>> out;
    backbone_.collect_buffers("backbone", out);
    return out;
}

template <typename T>
std::size_t count_params(const std::vector<Parameter<T>>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

template <typename T>
ModelSummary MSPCaps<T>::summary() const {
    ModelSummary s;
    std::map<std::string, std::size_t> index;
    for (const auto& p : parameters()) {
        // Group by module: backbone blocks individually, everything else by
        // its first path component.
        std::string key = p.name.substr(0, p.name.find('.'));
        if (key == "backbone") {
            const auto second = p.name.find('.', key.size() + 1);
            key = p.name.substr(0, second);
        }
        auto [it, fresh] = index.try_emplace(key, s.groups.size());
        if (fresh) s.groups.push_back({key, 0});
        s.groups[it->second].count += p.tensor.numel();
        s.total += p.tensor.numel();
    }
    for (const auto& pc : patchify_) {
        s.primary_caps.push_back(pc.grid().size());
        s.primary_grids.push_back(pc.grid());
    }
    if (!car_.empty()) {
        const std::size_t fine = s.primary_caps[0];
        const std::size_t mid = car_[0].params().n_out();
        s.group_sizes = {fine / car_[0].params().W2.dim(1), mid / car_[1].params().W2.dim(1)};
    }
    return s;
}

std::string format_summary(const ModelConfig& config, const ModelSummary& s) {
    std::ostringstream out;
    out << "routing: " << to_string(config.routing) << (config.weight_shared ? " (shared)" : " (unshared)") << '\n';
    out << "primary capsules:";
    std::size_t total_caps = 0;
    for (std::size_t i = 0; i < s.primary_caps.size(); ++i) {
        out << ' ' << s.primary_caps[i] << " (" << s.primary_grids[i].h << 'x' << s.primary_grids[i].w << ')';
        total_caps += s.primary_caps[i];
    }
    out << " total " << total_caps << '\n';
    if (!s.group_sizes.empty()) {
        out << "CAR group sizes:";
        for (auto g : s.group_sizes) out << ' ' << g;
        out << '\n';
    }
    out << "parameters:\n";
    for (const auto& g : s.groups) {
        out << "  " << g.name << ' ' << g.count << '\n';
    }
    out << "  total " << s.total << '\n';
    return out.str();
}

#define MSPCAPS_INSTANTIATE_MODEL(T)                                            \
    template class ResidualBlock<T>;                                            \
    template class MultiScaleBackbone<T>;                                       \
    template class MSPCaps<T>;                                                  \
    template std::size_t count_params(const std::vector<Parameter<T>>&);

MSPCAPS_INSTANTIATE_MODEL(float)
MSPCAPS_INSTANTIATE_MODEL(double)

}  // namespace mspcaps
