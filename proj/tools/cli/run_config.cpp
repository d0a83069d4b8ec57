#include "run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mspcaps/data.hpp"
#include "mspcaps/errors.hpp"

namespace mspcaps::cli {

using json = nlohmann::json;

namespace {

template <typename V>
V field(const json& v, const std::string& key) {
    try {
        return v.get<V>();
    } catch (const json::exception&) {
        throw ConfigError("config." + key + ": wrong type (got " + std::string(v.type_name()) + ")");
    }
}

std::size_t channels_for(const std::string& dataset) {
    return dataset == "mnist" || dataset == "fashion-mnist" ? 1 : 3;
}

}  // namespace

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // byte offset is the best position nlohmann reports
        throw ConfigError("config is not valid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        if (k == "preset") c.preset = field<std::string>(v, k);
        else if (k == "model") {
            if (!v.is_object()) throw ConfigError("config.model: expected an object");
            c.model = model_config_from_json(v.dump());
        } else if (k == "dataset") c.dataset = field<std::string>(v, k);
        else if (k == "data_dir") c.data_dir = field<std::string>(v, k);
        else if (k == "out_dir") c.out_dir = field<std::string>(v, k);
        else if (k == "init_seed") c.init_seed = field<std::uint64_t>(v, k);
        else if (k == "shuffle_seed") c.shuffle_seed = field<std::uint64_t>(v, k);
        else if (k == "dropout_seed") c.dropout_seed = field<std::uint64_t>(v, k);
        else if (k == "epochs") c.epochs = field<std::size_t>(v, k);
        else if (k == "batch_size") c.batch_size = field<std::size_t>(v, k);
        else if (k == "lr") c.lr = field<double>(v, k);
        else if (k == "weight_decay") c.weight_decay = field<double>(v, k);
        else if (k == "warmup_epochs") c.warmup_epochs = field<std::size_t>(v, k);
        else if (k == "min_lr") c.min_lr = field<double>(v, k);
        else if (k == "routing") c.routing = field<std::string>(v, k);
        else if (k == "scale_mask") c.scale_mask = field<std::array<bool, kScales>>(v, k);
        else if (k == "patch") c.patch = field<std::size_t>(v, k);
        else if (k == "weight_shared") c.weight_shared = field<bool>(v, k);
        else if (k == "dropout") c.dropout = field<double>(v, k);
        else if (k == "augment") c.augment = field<bool>(v, k);
        else if (k == "limit_train") c.limit_train = field<std::size_t>(v, k);
        else if (k == "limit_test") c.limit_test = field<std::size_t>(v, k);
        else if (k == "eval_batch_size") c.eval_batch_size = field<std::size_t>(v, k);
        else throw ConfigError("config." + k + ": unknown key");
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return run_config_from_json(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string default_data_dir() {
    if (const char* env = std::getenv("MSPCAPS_DATA_DIR"); env && *env) return env;
    const char* home = std::getenv("HOME");
    return std::string(home ? home : ".") + "/mspcaps-data";
}

RunConfig resolve(RunConfig c) {
    ModelConfig m;
    if (c.model) {
        m = *c.model;
    } else if (c.preset == "tiny") {
        m = ModelConfig::tiny();
    } else if (c.preset == "large") {
        m = ModelConfig::large();
    } else if (c.preset == "custom") {
        throw ConfigError("config.preset: custom needs a model object");
    } else {
        throw ConfigError("config.preset: expected tiny, large or custom, got '" + c.preset + "'");
    }
    const AugmentPolicy policy = policy_for(c.dataset);

    if (c.routing) m.routing = routing_from_string(*c.routing);
    if (c.scale_mask) m.scale_mask = *c.scale_mask;
    if (c.patch) m.patch = *c.patch;
    if (c.weight_shared) m.weight_shared = *c.weight_shared;
    if (c.dropout) m.dropout_rate = *c.dropout;
    else if (c.dataset == "svhn") m.dropout_rate = 0.0;
    m.input_channels = channels_for(c.dataset);
    m.input_size = policy.resize_to.value_or(32);
    m.input_mean = policy.normalize_mean;
    m.input_std = policy.normalize_std;
    m.validate();

    if (!c.epochs) c.epochs = c.dataset == "mnist" ? 100 : 300;
    if (!c.lr) c.lr = c.dataset == "fashion-mnist" ? 1e-4 : 5e-4;
    if (c.data_dir.empty()) c.data_dir = default_data_dir();
    if (c.batch_size < 2) throw ConfigError("config.batch_size: must be at least 2");
    if (c.eval_batch_size == 0) throw ConfigError("config.eval_batch_size: must be positive");
    if (!(*c.lr > 0.0)) throw ConfigError("config.lr: must be positive");
    if (c.min_lr < 0.0 || c.min_lr > *c.lr) throw ConfigError("config.min_lr: must lie in [0, lr]");
    if (c.weight_decay < 0.0) throw ConfigError("config.weight_decay: must be >= 0");

    c.model = m;
    c.routing = to_string(m.routing);
    c.scale_mask = m.scale_mask;
    c.patch = m.patch;
    c.weight_shared = m.weight_shared;
    c.dropout = m.dropout_rate;
    return c;
}

std::string to_json(const RunConfig& c) {
    json j;
    j["preset"] = c.preset;
    if (c.model) j["model"] = json::parse(mspcaps::to_json(*c.model));
    j["dataset"] = c.dataset;
    j["data_dir"] = c.data_dir;
    j["out_dir"] = c.out_dir;
    j["init_seed"] = c.init_seed;
    j["shuffle_seed"] = c.shuffle_seed;
    j["dropout_seed"] = c.dropout_seed;
    if (c.epochs) j["epochs"] = *c.epochs;
    j["batch_size"] = c.batch_size;
    if (c.lr) j["lr"] = *c.lr;
    j["weight_decay"] = c.weight_decay;
    j["warmup_epochs"] = c.warmup_epochs;
    j["min_lr"] = c.min_lr;
    if (c.routing) j["routing"] = *c.routing;
    if (c.scale_mask) j["scale_mask"] = *c.scale_mask;
    if (c.patch) j["patch"] = *c.patch;
    if (c.weight_shared) j["weight_shared"] = *c.weight_shared;
    if (c.dropout) j["dropout"] = *c.dropout;
    j["augment"] = c.augment;
    j["limit_train"] = c.limit_train;
    j["limit_test"] = c.limit_test;
    j["eval_batch_size"] = c.eval_batch_size;
    return j.dump(2);
}

TrainConfig train_config(const RunConfig& r) {
    TrainConfig t;
    t.epochs = r.epochs.value();
    t.batch_size = r.batch_size;
    t.lr = r.lr.value();
    t.weight_decay = r.weight_decay;
    t.warmup_epochs = r.warmup_epochs;
    t.min_lr = r.min_lr;
    t.shuffle_seed = r.shuffle_seed;
    t.augment = r.augment;
    t.eval_batch_size = r.eval_batch_size;
    t.eval_limit = r.limit_test;
    return t;
}

}  // namespace mspcaps::cli
