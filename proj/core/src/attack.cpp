#include "mspcaps/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mspcaps/capsule.hpp"
#include "mspcaps/errors.hpp"

namespace mspcaps {

const char* to_string(AttackKind kind) { return kind == AttackKind::fgsm ? "fgsm" : "bim"; }

AttackKind attack_from_string(const std::string& s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "bim") return AttackKind::bim;
    throw ConfigError("attack must be fgsm or bim, got '" + s + "'");
}

std::vector<double> default_epsilons() { return {0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2}; }

namespace {

void check_config(const AttackConfig& c) {
    if (!(c.epsilon >= 0.0)) throw ContractError("attack epsilon must be >= 0");
    if (c.steps == 0) throw ContractError("attack needs at least one step");
    if (c.steps > 1 && !(c.step_size() > 0.0) && c.epsilon > 0.0) {
        throw ContractError("attack step size must be positive");
    }
    if (!(c.pixel_lo < c.pixel_hi)) throw ContractError("attack pixel range is empty");
}

/// Turns off requires_grad on every parameter for the guard's lifetime, so
/// attacks leave parameter gradients untouched.
template <typename T>
class FrozenParams {
public:
    explicit FrozenParams(const MSPCaps<T>& model) : params_(model.parameters()) {
        for (auto& p : params_) {
            flags_.push_back(p.tensor.requires_grad());
            p.tensor.set_requires_grad(false);
        }
    }
    ~FrozenParams() {
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.set_requires_grad(flags_[i]);
    }
    FrozenParams(const FrozenParams&) = delete;
    FrozenParams& operator=(const FrozenParams&) = delete;

private:
    std::vector<Parameter<T>> params_;
    std::vector<bool> flags_;
};

template <typename T>
std::vector<T> input_gradient(MSPCaps<T>& model, const std::vector<T>& x, const Shape& shape,
                              const std::vector<int>& labels) {
    Tensor<T> leaf(shape, x, true);
    const CapsuleSet<T> out = model.forward(leaf, Mode::eval);
    margin_loss(out, labels).backward();
    const auto g = leaf.grad();
    return std::vector<T>(g.begin(), g.end());
}

template <typename T>
T sign(T v) {
    return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

/// Bounds of [x0 - eps, x0 + eps] in T, rounded inward so the exact distance
/// to x0 never exceeds the requested (double) epsilon.
template <typename T>
std::pair<T, T> ball(T x0, double eps) {
    using Wide = long double;
    const Wide lo_exact = Wide(x0) - Wide(eps);
    const Wide hi_exact = Wide(x0) + Wide(eps);
    T lo = static_cast<T>(lo_exact);
    T hi = static_cast<T>(hi_exact);
    if (Wide(lo) < lo_exact) lo = std::nextafter(lo, x0);
    if (Wide(hi) > hi_exact) hi = std::nextafter(hi, x0);
    return {lo, hi};
}

template <typename T>
void signed_step(std::vector<T>& xa, const std::vector<T>& x0, const std::vector<T>& grad, T step,
                 const AttackConfig& c) {
    const T plo = static_cast<T>(c.pixel_lo);
    const T phi = static_cast<T>(c.pixel_hi);
    for (std::size_t i = 0; i < xa.size(); ++i) {
        const auto [lo, hi] = ball(x0[i], c.epsilon);
        const T moved = xa[i] + step * sign(grad[i]);
        xa[i] = std::clamp(std::clamp(moved, lo, hi), plo, phi);
    }
}

}  // namespace

template <typename T>
Tensor<T> fgsm(MSPCaps<T>& model, const Tensor<T>& x, const std::vector<int>& labels, const AttackConfig& config) {
    check_config(config);
    FrozenParams<T> frozen(model);
    const std::vector<T> x0(x.data().begin(), x.data().end());
    const std::vector<T> grad = input_gradient(model, x0, x.shape(), labels);
    std::vector<T> xa = x0;
    signed_step(xa, x0, grad, static_cast<T>(config.epsilon), config);
    return Tensor<T>(x.shape(), std::move(xa));
}

template <typename T>
Tensor<T> bim(MSPCaps<T>& model, const Tensor<T>& x, const std::vector<int>& labels, const AttackConfig& config) {
    check_config(config);
    FrozenParams<T> frozen(model);
    const std::vector<T> x0(x.data().begin(), x.data().end());
    std::vector<T> xa = x0;
    const T step = static_cast<T>(config.step_size());
    for (std::size_t s = 0; s < config.steps; ++s) {
        const std::vector<T> grad = input_gradient(model, xa, x.shape(), labels);
        signed_step(xa, x0, grad, step, config);
    }
    return Tensor<T>(x.shape(), std::move(xa));
}

template <typename T>
RobustnessCurve robustness_sweep(MSPCaps<T>& model, const Dataset& data, const std::vector<double>& epsilons,
                                 AttackKind kind, std::size_t steps, std::size_t batch_size, std::size_t limit,
                                 std::string model_name) {
    for (std::size_t i = 1; i < epsilons.size(); ++i) {
        if (!(epsilons[i] > epsilons[i - 1])) {
            throw ConfigError("epsilons must be strictly increasing");
        }
    }
    const Dataset ds = data.head(limit);
    RobustnessCurve curve{to_string(kind), std::move(model_name), {}};
    for (double eps : epsilons) {
        AttackConfig cfg;
        cfg.epsilon = eps;
        cfg.steps = kind == AttackKind::fgsm ? 1 : steps;
        BatchIterator it(ds, batch_size);
        Batch batch;
        std::size_t correct = 0;
        while (it.next(batch)) {
            const Tensor<T> x = batch_tensor<T>(batch, ds);
            const Tensor<T> xa = kind == AttackKind::fgsm ? fgsm(model, x, batch.labels, cfg)
                                                          : bim(model, x, batch.labels, cfg);
            NoGradGuard no_grad;
            const std::vector<int> pred = predict(model.forward(xa, Mode::eval));
            for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
        }
        curve.points.push_back({eps, static_cast<double>(correct) / static_cast<double>(ds.n)});
    }
    return curve;
}

void append_robustness_csv(const std::filesystem::path& path, const RobustnessCurve& curve) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot write " + path.string());
    if (fresh) out << kRobustnessHeader << '\n';
    for (const auto& p : curve.points) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%g,%.6f,", p.epsilon, p.accuracy);
        out << buf << curve.attack << ',' << curve.model << '\n';
    }
}

#define MSPCAPS_INSTANTIATE_ATTACK(T)                                                                          \
    template Tensor<T> fgsm(MSPCaps<T>&, const Tensor<T>&, const std::vector<int>&, const AttackConfig&);     \
    template Tensor<T> bim(MSPCaps<T>&, const Tensor<T>&, const std::vector<int>&, const AttackConfig&);      \
    template RobustnessCurve robustness_sweep(MSPCaps<T>&, const Dataset&, const std::vector<double>&,         \
                                              AttackKind, std::size_t, std::size_t, std::size_t, std::string);

MSPCAPS_INSTANTIATE_ATTACK(float)
MSPCAPS_INSTANTIATE_ATTACK(double)

}  // namespace mspcaps
