#include <benchmark/benchmark.h>

#include "mspcaps/capsule.hpp"
#include "mspcaps/nn.hpp"
#include "mspcaps/ops.hpp"
#include "mspcaps/train.hpp"

using namespace mspcaps;

namespace {

Tensor<float> noise(const Shape& shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(uniform01(rng) - 0.5);
    return Tensor<float>(shape, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = noise({n, n}, 1), b = noise({n, n}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

// Batched tiny products, the shape capsule projections take.
void BM_MatmulBatchedSmall(benchmark::State& state) {
    const auto a = noise({128, 10, 64, 1, 8}, 1), w = noise({10, 64, 8, 32}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, w));
}
BENCHMARK(BM_MatmulBatchedSmall)->Unit(benchmark::kMillisecond);

void BM_Conv3x3(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    const auto hw = static_cast<std::size_t>(state.range(1));
    const auto x = noise({32, c, hw, hw}, 3);
    ConvParams<float> p{noise({c, c, 3, 3}, 4), std::nullopt, 1, 1};
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, p));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * 32 * c * c * 9 * hw * hw));
}
BENCHMARK(BM_Conv3x3)->Args({32, 32})->Args({64, 16})->Args({128, 8})->Unit(benchmark::kMillisecond);

void BM_Conv3x3Backward(benchmark::State& state) {
    auto x = noise({32, 64, 16, 16}, 5);
    ConvParams<float> p{noise({64, 64, 3, 3}, 6), noise({64}, 7), 1, 1};
    p.weight.set_requires_grad(true);
    x.set_requires_grad(true);
    for (auto _ : state) {
        sum_all(conv2d(x, p)).backward();
        p.weight.zero_grad();
    }
}
BENCHMARK(BM_Conv3x3Backward)->Unit(benchmark::kMillisecond);

void BM_CarForward(benchmark::State& state) {
    Rng rng(8);
    const CarBlock<float> block(16, 64, 8, 16, 8, 16, true, 0.0, SoftmaxAxis::outputs, rng);
    const CapsuleSet<float> u1{noise({128, 64, 8}, 9), Grid{8, 8}, 0};
    const CapsuleSet<float> u2{noise({128, 16, 8}, 10), Grid{4, 4}, 1};
    for (auto _ : state) benchmark::DoNotOptimize(block.forward(u1, u2, Mode::eval, rng));
}
BENCHMARK(BM_CarForward)->Unit(benchmark::kMillisecond);

void BM_TinyForwardEval(benchmark::State& state) {
    MSPCaps<float> model(ModelConfig::tiny(), 0);
    const auto x = noise({static_cast<std::size_t>(state.range(0)), 3, 32, 32}, 11);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(x, Mode::eval));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TinyForwardEval)->Arg(1)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_TinyTrainStep(benchmark::State& state) {
    MSPCaps<float> model(ModelConfig::tiny(), 0);
    AdamW<float> opt(model.parameters());
    const auto x = noise({128, 3, 32, 32}, 12);
    std::vector<int> labels(128);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 10);
    for (auto _ : state) {
        margin_loss(model.forward(x, Mode::train), labels).backward();
        opt.step(5e-4);
        opt.zero_grad();
    }
    state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_TinyTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
