#include <gtest/gtest.h>

#include <cmath>

#include "mspcaps/capsule.hpp"
#include "mspcaps/errors.hpp"
#include "mspcaps/ops.hpp"
#include "oracles.hpp"
#include "suites.hpp"

using namespace mspcaps;

namespace {

std::vector<double> vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(GroupMap, EnumeratesBlocksRowMajor) {
    for (auto [fine, coarse] : {std::pair{Grid{8, 8}, Grid{4, 4}}, std::pair{Grid{4, 4}, Grid{2, 2}},
                                std::pair{Grid{6, 4}, Grid{2, 2}}, std::pair{Grid{3, 3}, Grid{1, 1}}}) {
        const GroupMap g = group_map(fine, coarse);
        const std::size_t bh = fine.h / coarse.h, bw = fine.w / coarse.w;
        EXPECT_EQ(g.groups, coarse.size());
        EXPECT_EQ(g.group_size, bh * bw);
        for (std::size_t r = 0; r < fine.h; ++r) {
            for (std::size_t c = 0; c < fine.w; ++c) {
                const std::size_t i = r * fine.w + c;
                EXPECT_EQ(g.group_of[i], (r / bh) * coarse.w + c / bw);
                EXPECT_EQ(g.within_of[i], (r % bh) * bw + c % bw);
                EXPECT_EQ(g.order[g.group_of[i] * g.group_size + g.within_of[i]], i);
            }
        }
    }
    EXPECT_EQ(group_map({8, 8}, {4, 4}).order[1 * 4 + 2], 10u);
}

TEST(GroupMap, RejectsNonDividingGrids) {
    EXPECT_THROW(group_map({8, 8}, {3, 3}), Error);
    EXPECT_THROW(group_map({2, 2}, {4, 4}), Error);
}

TEST(Squash, MatchesOracleAndStaysInsideUnitBall) {
    const auto v = testkit::random_tensor({4, 3, 5}, 31, -3, 3, false);
    EXPECT_EQ(vec(squash(v)), testkit::squash_oracle(vec(v), 5));
    const auto z = squash(Tensor<double>::zeros({1, 2, 4}));
    for (double e : z.data()) EXPECT_EQ(e, 0.0);
    Tensor<double> big({1, 1, 2}, {300.0, 400.0});
    const auto s = squash(big);
    EXPECT_LT(std::hypot(s.data()[0], s.data()[1]), 1.0);
    EXPECT_NEAR(std::hypot(s.data()[0], s.data()[1]), 250000.0 / 250001.0, 1e-12);
}

TEST(MarginLoss, MatchesOracleOnRandomBatches) {
    const auto caps = testkit::random_tensor({5, 10, 4}, 41, -0.6, 0.6, false);
    const std::vector<int> labels{0, 3, 9, 3, 7};
    const double got = margin_loss(CapsuleSet<double>{caps, std::nullopt, -1}, labels).item();
    EXPECT_NEAR(got, testkit::margin_loss_oracle(vec(caps), labels, 5, 10, 4, 0.9, 0.1, 0.5), 1e-14);
}

TEST(MarginLoss, HandWorkedFixtures) {
    Tensor<double> c({1, 2, 2}, {0.6, 0.8, 0.3, 0.4}, true);
    const CapsuleSet<double> set{c, std::nullopt, -1};
    EXPECT_NEAR(margin_loss(set, {0}).item(), 0.08, 1e-12);
    EXPECT_NEAR(margin_loss(set, {1}).item(), 0.565, 1e-12);
    margin_loss(set, {1}).backward();
    // present class 1: -2 (0.9 - 0.5) v / 0.5; absent class 0: 2 * 0.5 * 0.9 * v
    EXPECT_NEAR(c.grad()[0], 0.54, 1e-12);
    EXPECT_NEAR(c.grad()[1], 0.72, 1e-12);
    EXPECT_NEAR(c.grad()[2], -0.48, 1e-12);
    EXPECT_NEAR(c.grad()[3], -0.64, 1e-12);
    EXPECT_THROW(margin_loss(set, {2}), Error);
}

TEST(MarginLoss, ZeroCapsuleHasZeroGradient) {
    Tensor<double> c({1, 2, 2}, {0.0, 0.0, 0.3, 0.4}, true);
    margin_loss(CapsuleSet<double>{c, std::nullopt, -1}, {0}).backward();
    EXPECT_EQ(c.grad()[0], 0.0);
    EXPECT_EQ(c.grad()[1], 0.0);
}

TEST(Predict, TiesGoToLowerIndex) {
    Tensor<double> c({2, 3, 1}, {0.5, 0.5, 0.1, 0.2, 0.7, 0.7});
    EXPECT_EQ(predict(CapsuleSet<double>{c, std::nullopt, -1}), (std::vector<int>{0, 1}));
}

TEST(Car, MatchesIndependentOracle) {
    const auto s = testkit::car_oracle_cases(60, 77);
    EXPECT_EQ(s.mismatches, 0u) << s.first_failure;
    EXPECT_EQ(s.cases, 60u);
}

TEST(DynamicRouting, MatchesIndependentOracle) {
    const auto s = testkit::dr_oracle_cases(60, 78);
    EXPECT_EQ(s.mismatches, 0u) << s.first_failure;
}

TEST(Car, CouplingNormalizesOverTheChosenAxis) {
    Rng rng(3);
    for (auto axis : {SoftmaxAxis::outputs, SoftmaxAxis::inputs}) {
        const CarBlock<double> block(3, 16, 4, 4, 4, 6, true, 0.0, axis, rng);
        const CapsuleSet<double> u1{testkit::random_tensor({2, 16, 4}, 51, -1, 1, false), Grid{4, 4}, 0};
        const CapsuleSet<double> u2{testkit::random_tensor({2, 4, 4}, 52, -1, 1, false), Grid{2, 2}, 1};
        CarTrace<double> trace;
        const auto out = block.forward(u1, u2, Mode::eval, rng, &trace);
        EXPECT_EQ(out.caps.shape(), (Shape{2, 3, 6}));
        EXPECT_FALSE(out.grid.has_value());
        const auto& c = trace.coupling;
        for (std::size_t b = 0; b < 2; ++b) {
            if (axis == SoftmaxAxis::outputs) {
                for (std::size_t g = 0; g < 4; ++g) {
                    double t = 0;
                    for (std::size_t j = 0; j < 3; ++j) t += c.data()[(b * 3 + j) * 4 + g];
                    EXPECT_NEAR(t, 1.0, 1e-12);
                }
            } else {
                for (std::size_t j = 0; j < 3; ++j) {
                    double t = 0;
                    for (std::size_t g = 0; g < 4; ++g) t += c.data()[(b * 3 + j) * 4 + g];
                    EXPECT_NEAR(t, 1.0, 1e-12);
                }
            }
        }
    }
}

TEST(Car, OutputKeepsCoarseGridWhenCountsMatch) {
    Rng rng(4);
    const CarBlock<double> block(4, 16, 4, 4, 4, 4, true, 0.1, SoftmaxAxis::outputs, rng);
    const CapsuleSet<double> u1{testkit::random_tensor({1, 16, 4}, 53, -1, 1, false), Grid{4, 4}, 0};
    const CapsuleSet<double> u2{testkit::random_tensor({1, 4, 4}, 54, -1, 1, false), Grid{2, 2}, 1};
    const auto out = block.forward(u1, u2, Mode::train, rng);
    ASSERT_TRUE(out.grid.has_value());
    EXPECT_EQ(*out.grid, (Grid{2, 2}));
    const CapsuleSet<double> no_grid{u2.caps, std::nullopt, 1};
    EXPECT_THROW(block.forward(u1, no_grid, Mode::eval, rng), Error);
}
