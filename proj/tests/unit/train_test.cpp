#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mspcaps/errors.hpp"
#include "mspcaps/train.hpp"
#include "suites.hpp"

using namespace mspcaps;
namespace fs = std::filesystem;

namespace {

// Small enough to train a few steps in well under a second.
ModelConfig small_config() {
    ModelConfig c;
    c.channels = {4, 8, 8};
    c.convs_per_block = 1;
    c.caps_dims = {4, 4, 4};
    c.d_mid = 4;
    c.d_out = 4;
    c.patch = 2;
    c.input_channels = 1;
    c.input_size = 16;
    return c;
}

Dataset synthetic(std::size_t n, std::uint64_t seed) {
    Dataset d;
    d.name = "synthetic";
    d.n = n;
    d.c = 1;
    d.h = d.w = 16;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const auto label = static_cast<std::uint8_t>(i % 10);
        d.labels.push_back(label);
        for (std::size_t p = 0; p < 256; ++p) {
            const bool on = (p / 16 + p % 16) % 10 == label;
            d.images.push_back(static_cast<float>(on ? 0.8 + 0.2 * uniform01(rng) : 0.2 * uniform01(rng)));
        }
    }
    return d;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mspcaps_train_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string without_seconds(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
}

}  // namespace

TEST(AdamW, DecayOnlyStepWithZeroGradient) {
    Parameter<double> p{"w", Tensor<double>({1}, {1.0}, true), true};
    Parameter<double> q{"b", Tensor<double>({1}, {1.0}, true), false};
    p.tensor.mutable_grad()[0] = 0.0;
    q.tensor.mutable_grad()[0] = 0.0;
    AdamW<double> opt({p, q}, {0.9, 0.999, 1e-8, 1e-4});
    opt.step(5e-4);
    EXPECT_DOUBLE_EQ(p.tensor.data()[0], 1.0 - 5e-8);
    EXPECT_EQ(q.tensor.data()[0], 1.0);
}

TEST(AdamW, BiasCorrectedFirstSteps) {
    Parameter<double> p{"w", Tensor<double>({2}, {0.5, -0.5}, true), false};
    AdamW<double> opt({p});
    p.tensor.mutable_grad()[0] = 2.0;
    p.tensor.mutable_grad()[1] = -0.25;
    opt.step(1e-3);
    // m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
    EXPECT_NEAR(p.tensor.data()[0], 0.5 - 1e-3 * 2.0 / (2.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p.tensor.data()[1], -0.5 + 1e-3 * 0.25 / (0.25 + 1e-8), 1e-15);
    EXPECT_EQ(opt.steps(), 1u);
    p.tensor.mutable_grad()[0] = 1.0;
    p.tensor.mutable_grad()[1] = 0.0;
    opt.step(1e-3);
    const double m = (0.9 * 0.1 * 2.0 + 0.1 * 1.0) / (1 - 0.81);
    const double v = (0.999 * 0.001 * 4.0 + 0.001 * 1.0) / (1 - 0.999 * 0.999);
    EXPECT_NEAR(p.tensor.data()[0], 0.5 - 1e-3 * 2.0 / (2.0 + 1e-8) - 1e-3 * m / (std::sqrt(v) + 1e-8), 1e-15);
}

TEST(AdamW, MissingGradientIsAContractError) {
    Parameter<double> p{"w", Tensor<double>({1}, {1.0}, true), true};
    AdamW<double> opt({p});
    EXPECT_THROW(opt.step(1e-3), ContractError);
}

TEST(Schedule, WarmupThenCosineToFloor) {
    Schedule s;
    s.steps_per_epoch = 391;
    EXPECT_NEAR(lr_at(s, 0), 5e-5, 1e-18);
    EXPECT_NEAR(lr_at(s, s.warmup_steps() / 2), 5e-5 + 0.5 * 4.5e-4 * (977.0 / 977.5), 1e-12);
    EXPECT_DOUBLE_EQ(lr_at(s, s.warmup_steps()), 5e-4);
    EXPECT_NEAR(lr_at(s, s.total_steps() - 1), 1e-6, 1e-12);
    double prev = lr_at(s, s.warmup_steps());
    for (std::size_t t = s.warmup_steps() + 1; t < s.total_steps(); t += 97) {
        EXPECT_LE(lr_at(s, t), prev);
        prev = lr_at(s, t);
    }
    const std::size_t mid = s.warmup_steps() + (s.total_steps() - 1 - s.warmup_steps()) / 2;
    EXPECT_NEAR(lr_at(s, mid), 1e-6 + (5e-4 - 1e-6) * 0.5, 1e-9);
}

TEST(Checkpoint, RoundTripRestoresModelAndOptimizer) {
    const fs::path dir = scratch("ckpt");
    MSPCaps<float> m(small_config(), 1);
    const Dataset d = synthetic(24, 1);
    AdamW<float> opt(m.parameters());
    Schedule s;
    s.steps_per_epoch = 3;
    std::uint64_t step = 0;
    TrainOptions o;
    o.batch_size = 8;
    o.shuffle_seed = 2;
    train_epoch(m, d, opt, s, o, 0, step);
    save_checkpoint(dir / "a.ckpt", capture_checkpoint(m, &opt));

    MSPCaps<float> m2(small_config(), 99);
    AdamW<float> opt2(m2.parameters());
    restore_checkpoint(m2, &opt2, load_checkpoint(dir / "a.ckpt"));
    EXPECT_EQ(opt2.steps(), 3u);
    EXPECT_EQ(opt2.first_moments(), opt.first_moments());
    const auto e1 = evaluate(m, d), e2 = evaluate(m2, d);
    EXPECT_EQ(e1.predictions, e2.predictions);
    EXPECT_EQ(e1.loss, e2.loss);
}

TEST(Checkpoint, CorruptionAndMismatchAreReported) {
    const fs::path dir = scratch("corrupt");
    MSPCaps<float> m(small_config(), 1);
    save_checkpoint(dir / "ok.ckpt", capture_checkpoint<float>(m, nullptr));
    auto bytes = read_file(dir / "ok.ckpt");

    auto write = [&](const std::string& name, const std::vector<std::uint8_t>& b) {
        std::ofstream(dir / name, std::ios::binary).write(reinterpret_cast<const char*>(b.data()),
                                                          static_cast<std::streamsize>(b.size()));
        return dir / name;
    };
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(load_checkpoint(write("magic.ckpt", bad_magic)), FormatError);
    EXPECT_THROW(load_checkpoint(write("short.ckpt", {bytes.begin(), bytes.end() - 5})), FormatError);
    auto version = bytes;
    version[4] = 9;
    EXPECT_THROW(load_checkpoint(write("version.ckpt", version)), IncompatibleError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);

    ModelConfig other = small_config();
    other.d_out = 6;
    MSPCaps<float> m3(other, 1);
    EXPECT_THROW(restore_checkpoint<float>(m3, nullptr, load_checkpoint(dir / "ok.ckpt")), IncompatibleError);
}

TEST(Trainer, RunsAreReproducibleAndResumeIsExact) {
    const Dataset train = synthetic(40, 3), test = synthetic(20, 4);
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.warmup_epochs = 1;
    tc.shuffle_seed = 5;
    tc.augment = false;

    auto run = [&](const fs::path& dir, std::optional<std::size_t> until) {
        MSPCaps<float> m(small_config(), 7, 8);
        Trainer<float> t(m, tc, train, &test, dir);
        t.run(until);
        return read_text(dir / "metrics.csv");
    };
    const fs::path a = scratch("run_a"), b = scratch("run_b"), c = scratch("run_c");
    const std::string full = run(a, std::nullopt);
    EXPECT_EQ(without_seconds(full), without_seconds(run(b, std::nullopt)));
    EXPECT_TRUE(fs::exists(a / "best.ckpt"));
    EXPECT_TRUE(fs::exists(a / "last.ckpt"));
    EXPECT_EQ(std::count(full.begin(), full.end(), '\n'), 7);

    run(c, 1);
    MSPCaps<float> m(small_config(), 100, 100);
    Trainer<float> t(m, tc, train, &test, c);
    t.resume(c / "last.ckpt");
    EXPECT_EQ(t.epoch(), 1u);
    t.run();
    EXPECT_EQ(without_seconds(read_text(c / "metrics.csv")), without_seconds(full));
    EXPECT_EQ(read_file(c / "last.ckpt"), read_file(a / "last.ckpt"));
}

TEST(TrainEpoch, NonFiniteLossAborts) {
    MSPCaps<float> m(small_config(), 1);
    Dataset d = synthetic(8, 1);
    d.images[3] = std::nanf("");
    AdamW<float> opt(m.parameters());
    Schedule s;
    std::uint64_t step = 0;
    TrainOptions o;
    o.batch_size = 8;
    EXPECT_THROW(train_epoch(m, d, opt, s, o, 0, step), NumericError);
}

TEST(Metrics, AppendWritesHeaderOnce) {
    const fs::path dir = scratch("metrics");
    append_metrics_row(dir / "m.csv", 1, "train", 0.5, 0.25, 1e-4, 1.0);
    append_metrics_row(dir / "m.csv", 1, "test", 0.4, 0.5, 1e-4, 0.5);
    const std::string text = read_text(dir / "m.csv");
    EXPECT_EQ(text.find(kMetricsHeader), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
