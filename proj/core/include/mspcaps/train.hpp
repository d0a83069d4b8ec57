#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mspcaps/data.hpp"
#include "mspcaps/model.hpp"
#include "mspcaps/nn.hpp"

namespace mspcaps {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

/// AdamW with decoupled decay applied before the moment update. Only
/// parameters flagged `decay` are decayed.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Parameter<T>> params, AdamWConfig config = {});

    /// One update with learning rate `lr`; every parameter needs a grad.
    void step(double lr);
    void zero_grad();

    const std::vector<Parameter<T>>& params() const { return params_; }
    const AdamWConfig& config() const { return config_; }
    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
    std::vector<Parameter<T>> params_;
    AdamWConfig config_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    std::uint64_t t_ = 0;
};

struct Schedule {
    double base_lr = 5e-4;
    std::size_t warmup_epochs = 5;
    double warmup_start_fraction = 0.1;
    std::size_t total_epochs = 300;
    double min_lr = 1e-6;
    std::size_t steps_per_epoch = 1;

    std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
    std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
};

/// Linear warmup from warmup_start_fraction * base_lr to base_lr over the
/// warmup steps, then cosine decay that reaches min_lr on the last step.
double lr_at(const Schedule& schedule, std::size_t step);

struct EpochMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
    std::size_t samples = 0;
};

struct TrainOptions {
    std::size_t batch_size = 128;
    std::uint64_t shuffle_seed = 0;
    const AugmentPolicy* augment = nullptr;  // null trains on raw images
    std::size_t max_steps = 0;               // stop the epoch early when > 0
};

/// One pass of forward, margin loss, backward and AdamW over shuffled
/// batches. Batches of a single image are skipped (BatchNorm needs two).
/// Throws NumericError with step, lr and loss on a non-finite loss.
template <typename T>
EpochMetrics train_epoch(MSPCaps<T>& model, const Dataset& data, AdamW<T>& opt, const Schedule& schedule,
                         const TrainOptions& options, std::size_t epoch, std::uint64_t& global_step);

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t samples = 0;
    std::vector<int> predictions;
};

/// Eval-mode accuracy and mean margin loss over the first `limit` items
/// (all when 0).
template <typename T>
EvalResult evaluate(MSPCaps<T>& model, const Dataset& data, std::size_t batch_size = 256, std::size_t limit = 0);

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

/// Binary layout (little-endian):
///   "MSPC" u32 version u64 fingerprint
///   str model_json  str run_json  str rng_state
///   u64 epoch  u64 global_step  u64 adam_steps  f64 best_accuracy
///   u32 count, then per tensor: str name, u32 rank, u32 dims[rank], f32 data
/// where str is u32 length + bytes. Model tensors are named as in
/// parameters()/buffers(); moments are "adam.m:<name>" and "adam.v:<name>".
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t fingerprint = 0;
    std::string model_json;
    std::string run_json;
    std::string rng_state;
    std::uint64_t epoch = 0;
    std::uint64_t global_step = 0;
    std::uint64_t adam_steps = 0;
    double best_accuracy = -1.0;
    std::vector<NamedTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of the model (and optimizer, when given).
template <typename T>
Checkpoint capture_checkpoint(MSPCaps<T>& model, const AdamW<T>* opt);

/// Restores model state; throws IncompatibleError when the checkpoint was
/// written for a different model configuration.
template <typename T>
void restore_checkpoint(MSPCaps<T>& model, AdamW<T>* opt, const Checkpoint& ckpt);

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 128;
    double lr = 5e-4;
    double weight_decay = 1e-4;
    std::size_t warmup_epochs = 5;
    double min_lr = 1e-6;
    std::uint64_t shuffle_seed = 0;
    bool augment = true;
    std::size_t eval_batch_size = 256;
    std::size_t eval_limit = 0;
};

/// Drives train_epoch/evaluate and writes metrics.csv, last.ckpt and
/// best.ckpt into the output directory.
template <typename T>
class Trainer {
public:
    Trainer(MSPCaps<T>& model, TrainConfig config, const Dataset& train, const Dataset* test,
            std::filesystem::path out_dir, std::string run_json = {}, std::ostream* log = nullptr);

    /// Continues from a checkpoint written by this trainer.
    void resume(const std::filesystem::path& checkpoint);
    /// Trains until `epochs` are complete (the configured total by default).
    void run(std::optional<std::size_t> until_epoch = std::nullopt);

    std::size_t epoch() const { return epoch_; }
    const std::vector<EpochMetrics>& history() const { return history_; }
    AdamW<T>& optimizer() { return opt_; }
    const Schedule& schedule() const { return schedule_; }

private:
    MSPCaps<T>& model_;
    TrainConfig config_;
    const Dataset& train_;
    const Dataset* test_;
    std::filesystem::path out_dir_;
    std::string run_json_;
    std::ostream* log_;
    AdamW<T> opt_;
    Schedule schedule_;
    AugmentPolicy policy_;
    std::size_t epoch_ = 0;
    std::uint64_t global_step_ = 0;
    double best_accuracy_ = -1.0;
    std::vector<EpochMetrics> history_;
};

inline constexpr const char* kMetricsHeader = "epoch,split,loss,accuracy,lr,seconds";

/// Appends one metrics row, writing the header first when the file is new.
void append_metrics_row(const std::filesystem::path& csv, std::size_t epoch, const std::string& split, double loss,
                        double accuracy, double lr, double seconds);

}  // namespace mspcaps
