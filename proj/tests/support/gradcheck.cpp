#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mspcaps/ops.hpp"
#include "mspcaps/rng.hpp"

namespace mspcaps::testkit {

namespace {

double weighted_sum(const Tensor<double>& out, const std::vector<double>& w) {
    double acc = 0.0;
    const auto d = out.data();
    for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * w[i];
    return acc;
}

}  // namespace

GradCheckReport gradcheck(const GradFn& f, std::vector<Tensor<double>> inputs, const GradCheckOptions& o) {
    for (auto& t : inputs) {
        if (t.is_leaf()) {
            t.set_requires_grad(true);
            t.zero_grad();
        }
    }
    Tensor<double> out = f(inputs);
    Rng rng(o.seed);
    std::vector<double> weights(out.numel());
    for (auto& w : weights) w = 2.0 * uniform01(rng) - 1.0;
    const Tensor<double> loss = sum_all(out * Tensor<double>(out.shape(), weights));
    loss.backward();

    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) {
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.numel(), 0.0));
    }

    auto eval = [&] {
        NoGradGuard guard;
        return weighted_sum(f(inputs), weights);
    };

    const double f0 = eval();
    GradCheckReport report;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::vector<std::size_t> coords(inputs[i].numel());
        std::iota(coords.begin(), coords.end(), 0);
        if (o.max_coords && coords.size() > o.max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(o.max_coords);
            std::sort(coords.begin(), coords.end());
        }
        auto data = inputs[i].mutable_data();
        for (std::size_t j : coords) {
            const double x0 = data[j];
            data[j] = x0 + o.h;
            const double fp = eval();
            data[j] = x0 - o.h;
            const double fm = eval();
            data[j] = x0;
            const double up = (fp - f0) / o.h;
            const double down = (f0 - fm) / o.h;
            const double numeric = (fp - fm) / (2.0 * o.h);
            const double a = analytic[i][j];
            const double scale = std::max({std::abs(up), std::abs(down), o.floor});
            if (std::abs(up - down) > o.kink_tol * scale) {
                ++report.skipped;
                continue;
            }
            ++report.checked;
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), o.floor});
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                char buf[160];
                std::snprintf(buf, sizeof buf, "input %zu[%zu]: analytic %.10g numeric %.10g", i, j, a, numeric);
                report.worst = buf;
            }
        }
    }
    return report;
}

Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi, bool requires_grad) {
    Rng rng(seed);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
    return Tensor<double>(shape, std::move(v), requires_grad);
}

Tensor<double> random_away_from_zero(const Shape& shape, std::uint64_t seed, double gap) {
    Rng rng(seed);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        const double m = gap + (1.0 - gap) * uniform01(rng);
        x = uniform01(rng) < 0.5 ? -m : m;
    }
    return Tensor<double>(shape, std::move(v), true);
}

}  // namespace mspcaps::testkit
