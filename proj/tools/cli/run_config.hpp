#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mspcaps/model.hpp"
#include "mspcaps/train.hpp"

namespace mspcaps::cli {

/// Flat run description. Optional fields left unset are filled by
/// resolve() from the preset and the per-dataset recipe.
///
/// JSON keys (all optional):
///   preset          "tiny" | "large" | "custom" (custom needs "model")
///   model           full model config object; replaces the preset
///   dataset         mnist | fashion-mnist | cifar10 | svhn
///   data_dir        dataset root
///   out_dir         output directory
///   init_seed, shuffle_seed, dropout_seed
///   epochs, batch_size, lr, weight_decay, warmup_epochs, min_lr
///   routing         "car" | "dr"
///   scale_mask      [bool, bool, bool]
///   patch           patch size p
///   weight_shared   bool
///   dropout         coupling dropout rate
///   augment         bool
///   limit_train, limit_test   first-N subsets (0 = all)
///   eval_batch_size
struct RunConfig {
    std::string preset = "tiny";
    std::optional<ModelConfig> model;
    std::string dataset = "cifar10";
    std::string data_dir;
    std::string out_dir = "runs/mspcaps";
    std::uint64_t init_seed = 0;
    std::uint64_t shuffle_seed = 0;
    std::uint64_t dropout_seed = 0;
    std::optional<std::size_t> epochs;
    std::size_t batch_size = 128;
    std::optional<double> lr;
    double weight_decay = 1e-4;
    std::size_t warmup_epochs = 5;
    double min_lr = 1e-6;
    std::optional<std::string> routing;
    std::optional<std::array<bool, kScales>> scale_mask;
    std::optional<std::size_t> patch;
    std::optional<bool> weight_shared;
    std::optional<double> dropout;
    bool augment = true;
    std::size_t limit_train = 0;
    std::size_t limit_test = 0;
    std::size_t eval_batch_size = 256;
};

/// Parses a run config; unknown keys and ill-typed values throw ConfigError
/// naming the key.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every optional filled in: the model config is built and validated, and
/// the dataset recipe (epochs, lr, dropout, input statistics) applied.
RunConfig resolve(RunConfig config);

/// Canonical JSON of a resolved config; feeding it back reproduces the run.
std::string to_json(const RunConfig& config);

TrainConfig train_config(const RunConfig& resolved);

/// $MSPCAPS_DATA_DIR, else ~/mspcaps-data.
std::string default_data_dir();

}  // namespace mspcaps::cli
