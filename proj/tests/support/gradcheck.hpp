#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mspcaps/tensor.hpp"

namespace mspcaps::testkit {

struct GradCheckOptions {
    double h = 1e-5;
    // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-4;
    // Coordinates sampled per input; 0 checks every coordinate.
    std::size_t max_coords = 0;
    std::uint64_t seed = 7;
    // A coordinate whose one-sided slopes differ by more than this (relative)
    // straddles a kink of a piecewise op and is skipped.
    double kink_tol = 2e-3;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::string worst;  // "input i[j]: analytic a numeric n"
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients of sum(f(inputs) * R), R a fixed random
/// weighting, against central differences. Inputs are perturbed in place
/// and restored, so they may alias model parameters.
GradCheckReport gradcheck(const GradFn& f, std::vector<Tensor<double>> inputs, const GradCheckOptions& options = {});

/// Tensor with entries uniform in [lo, hi).
Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = true);

/// Uniform entries with magnitude at least `gap`, keeping relu and max away
/// from their kinks.
Tensor<double> random_away_from_zero(const Shape& shape, std::uint64_t seed, double gap = 0.1);

}  // namespace mspcaps::testkit
