#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mspcaps/data.hpp"
#include "mspcaps/model.hpp"

namespace mspcaps {

enum class AttackKind { fgsm, bim };

const char* to_string(AttackKind kind);
AttackKind attack_from_string(const std::string& s);

/// L-infinity attack in [pixel_lo, pixel_hi] pixel space.
struct AttackConfig {
    double epsilon = 0.0;
    std::size_t steps = 1;
    std::optional<double> alpha;  // per-step size; epsilon / steps when unset
    double pixel_lo = 0.0;
    double pixel_hi = 1.0;

    double step_size() const { return alpha.value_or(epsilon / static_cast<double>(steps)); }
};

/// x + epsilon * sign(grad_x margin_loss), clipped to the epsilon ball and
/// the pixel range. Gradients are taken in eval mode with the model's
/// parameters frozen.
template <typename T>
Tensor<T> fgsm(MSPCaps<T>& model, const Tensor<T>& x, const std::vector<int>& labels, const AttackConfig& config);

/// `steps` signed-gradient steps of size alpha, each followed by projection
/// onto the epsilon ball around x and the pixel range.
template <typename T>
Tensor<T> bim(MSPCaps<T>& model, const Tensor<T>& x, const std::vector<int>& labels, const AttackConfig& config);

struct CurvePoint {
    double epsilon = 0.0;
    double accuracy = 0.0;
};

struct RobustnessCurve {
    std::string attack;
    std::string model;
    std::vector<CurvePoint> points;
};

std::vector<double> default_epsilons();

/// Accuracy under attack at each epsilon (strictly increasing) over the
/// first `limit` test items (all when 0).
template <typename T>
RobustnessCurve robustness_sweep(MSPCaps<T>& model, const Dataset& data, const std::vector<double>& epsilons,
                                 AttackKind kind, std::size_t steps = 10, std::size_t batch_size = 128,
                                 std::size_t limit = 0, std::string model_name = "mspcaps");

inline constexpr const char* kRobustnessHeader = "epsilon,accuracy,attack,model";

/// Writes the header when the file is new, then one row per point.
void append_robustness_csv(const std::filesystem::path& path, const RobustnessCurve& curve);

}  // namespace mspcaps
