#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mspcaps/attack.hpp"
#include "mspcaps/data.hpp"
#include "mspcaps/errors.hpp"
#include "mspcaps/model.hpp"
#include "mspcaps/parallel.hpp"
#include "mspcaps/train.hpp"
#include "run_config.hpp"

namespace mspcaps::cli {

namespace fs = std::filesystem;

namespace {

/// Flags shared by train and inspect that override the config file.
struct ModelFlags {
    std::string preset;
    std::string dataset;
    std::string routing;
    std::string scale_mask;
    std::size_t patch = 0;
    bool shared = false;
    bool unshared = false;
    double dropout = 0.0;
    CLI::Option* dropout_opt = nullptr;

    void add(CLI::App& app) {
        app.add_option("--preset", preset, "tiny, large or custom")->check(CLI::IsMember({"tiny", "large", "custom"}));
        app.add_option("--dataset", dataset, "mnist, fashion-mnist, cifar10 or svhn");
        app.add_option("--routing", routing, "car or dr")->check(CLI::IsMember({"car", "dr"}));
        app.add_option("--scale-mask", scale_mask, "active scales, e.g. 1,1,0");
        app.add_option("--patch", patch, "patch size p");
        auto* s = app.add_flag("--shared", shared, "share the CAR projection across scales");
        auto* u = app.add_flag("--unshared", unshared, "separate projections per scale");
        s->excludes(u);
        dropout_opt = app.add_option("--dropout", dropout, "coupling dropout rate");
    }

    void apply(RunConfig& c) const {
        if (!preset.empty()) {
            c.preset = preset;
            c.model.reset();
        }
        if (!dataset.empty()) c.dataset = dataset;
        if (!routing.empty()) c.routing = routing;
        if (!scale_mask.empty()) c.scale_mask = parse_mask(scale_mask);
        if (patch) c.patch = patch;
        if (shared) c.weight_shared = true;
        if (unshared) c.weight_shared = false;
        if (dropout_opt->count()) c.dropout = dropout;
    }

    static std::array<bool, kScales> parse_mask(const std::string& text) {
        std::array<bool, kScales> mask{};
        std::stringstream ss(text);
        std::string item;
        std::size_t i = 0;
        while (std::getline(ss, item, ',')) {
            if (i >= kScales || (item != "0" && item != "1" && item != "true" && item != "false")) {
                throw ConfigError("--scale-mask: expected three of 0/1, got '" + text + "'");
            }
            mask[i++] = item == "1" || item == "true";
        }
        if (i != kScales) throw ConfigError("--scale-mask: expected three of 0/1, got '" + text + "'");
        return mask;
    }
};

void log_summary(const ModelConfig& config, const ModelSummary& summary) {
    std::cerr << format_summary(config, summary);
}

Dataset load_split(const RunConfig& c, Split split, std::size_t limit) {
    Dataset ds = load_dataset(c.dataset, c.data_dir, split);
    return limit ? ds.head(limit) : ds;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text << '\n';
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string config;
    ModelFlags model;
    std::string data_dir, out_dir, resume;
    std::size_t epochs = 0, batch_size = 0, limit_train = 0, limit_test = 0, warmup = 0;
    double lr = 0, weight_decay = 0;
    std::uint64_t seed = 0, init_seed = 0, shuffle_seed = 0, dropout_seed = 0;
    bool no_augment = false;
    CLI::Option *epochs_o, *batch_o, *lt_o, *lte_o, *warm_o, *lr_o, *wd_o, *seed_o, *is_o, *ss_o, *ds_o;
};

void add_train(CLI::App& sub, TrainArgs& a) {
    sub.add_option("--config", a.config, "run config JSON");
    a.model.add(sub);
    sub.add_option("--data-dir", a.data_dir, "dataset root");
    sub.add_option("--out", a.out_dir, "output directory");
    a.epochs_o = sub.add_option("--epochs", a.epochs);
    a.batch_o = sub.add_option("--batch-size", a.batch_size);
    a.lt_o = sub.add_option("--limit-train", a.limit_train, "train on the first N items");
    a.lte_o = sub.add_option("--limit-test", a.limit_test, "evaluate on the first N items");
    a.warm_o = sub.add_option("--warmup-epochs", a.warmup);
    a.lr_o = sub.add_option("--lr", a.lr);
    a.wd_o = sub.add_option("--weight-decay", a.weight_decay);
    a.seed_o = sub.add_option("--seed", a.seed, "sets init, shuffle and dropout seeds");
    a.is_o = sub.add_option("--init-seed", a.init_seed);
    a.ss_o = sub.add_option("--shuffle-seed", a.shuffle_seed);
    a.ds_o = sub.add_option("--dropout-seed", a.dropout_seed);
    sub.add_flag("--no-augment", a.no_augment);
    sub.add_option("--resume", a.resume, "continue from a checkpoint");
}

int cmd_train(const TrainArgs& a) {
    RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    a.model.apply(c);
    if (!a.data_dir.empty()) c.data_dir = a.data_dir;
    if (!a.out_dir.empty()) c.out_dir = a.out_dir;
    if (a.epochs_o->count()) c.epochs = a.epochs;
    if (a.batch_o->count()) c.batch_size = a.batch_size;
    if (a.lt_o->count()) c.limit_train = a.limit_train;
    if (a.lte_o->count()) c.limit_test = a.limit_test;
    if (a.warm_o->count()) c.warmup_epochs = a.warmup;
    if (a.lr_o->count()) c.lr = a.lr;
    if (a.wd_o->count()) c.weight_decay = a.weight_decay;
    if (a.seed_o->count()) c.init_seed = c.shuffle_seed = c.dropout_seed = a.seed;
    if (a.is_o->count()) c.init_seed = a.init_seed;
    if (a.ss_o->count()) c.shuffle_seed = a.shuffle_seed;
    if (a.ds_o->count()) c.dropout_seed = a.dropout_seed;
    if (a.no_augment) c.augment = false;
    const RunConfig r = resolve(c);
    const std::string run_json = to_json(r);

    fs::create_directories(r.out_dir);
    write_text(fs::path(r.out_dir) / "config.resolved.json", run_json);

    MSPCaps<float> model(*r.model, r.init_seed, r.dropout_seed);
    log_summary(*r.model, model.summary());
    std::cerr << "dataset " << r.dataset << " from " << r.data_dir << std::endl;
    const Dataset train = load_split(r, Split::train, r.limit_train);
    const Dataset test = load_split(r, Split::test, r.limit_test);
    std::cerr << "train " << train.n << " test " << test.n << " epochs " << *r.epochs << " lr " << *r.lr
              << std::endl;

    Trainer<float> trainer(model, train_config(r), train, &test, r.out_dir, run_json, &std::cerr);
    if (!a.resume.empty()) {
        trainer.resume(a.resume);
        std::cerr << "resumed at epoch " << trainer.epoch() << std::endl;
    }
    trainer.run();
    return kOk;
}

// ------------------------------------------------- checkpoint loading

struct LoadedModel {
    Checkpoint ckpt;
    std::optional<RunConfig> run;  // from the checkpoint or --config
    std::unique_ptr<MSPCaps<float>> model;
};

LoadedModel load_model(const std::string& checkpoint, const std::string& config_path) {
    LoadedModel out;
    out.ckpt = load_checkpoint(checkpoint);
    ModelConfig mc;
    if (!config_path.empty()) {
        out.run = resolve(load_run_config(config_path));
        mc = *out.run->model;
    } else {
        mc = model_config_from_json(out.ckpt.model_json);
        if (!out.ckpt.run_json.empty()) out.run = run_config_from_json(out.ckpt.run_json);
    }
    out.model = std::make_unique<MSPCaps<float>>(mc, 0);
    restore_checkpoint(*out.model, static_cast<AdamW<float>*>(nullptr), out.ckpt);
    return out;
}

RunConfig data_source(const LoadedModel& m, const std::string& dataset, const std::string& data_dir) {
    RunConfig c = m.run.value_or(RunConfig{});
    if (!dataset.empty()) c.dataset = dataset;
    else if (!m.run) throw ConfigError("--dataset is required: the checkpoint records no run config");
    if (!data_dir.empty()) c.data_dir = data_dir;
    if (c.data_dir.empty()) c.data_dir = default_data_dir();
    return c;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
    std::string checkpoint, config, dataset, data_dir, csv, split = "test";
    std::size_t limit = 0, batch_size = 256;
};

void add_eval(CLI::App& sub, EvalArgs& a) {
    sub.add_option("checkpoint", a.checkpoint, "checkpoint file")->required();
    sub.add_option("--config", a.config, "build the model from this run config instead");
    sub.add_option("--dataset", a.dataset);
    sub.add_option("--data-dir", a.data_dir);
    sub.add_option("--split", a.split)->check(CLI::IsMember({"train", "test"}));
    sub.add_option("--limit", a.limit, "evaluate the first N items");
    sub.add_option("--batch-size", a.batch_size);
    sub.add_option("--csv", a.csv, "metrics CSV to append to (default: next to the checkpoint)");
}

int cmd_eval(const EvalArgs& a) {
    LoadedModel m = load_model(a.checkpoint, a.config);
    const RunConfig src = data_source(m, a.dataset, a.data_dir);
    const Split split = a.split == "train" ? Split::train : Split::test;
    const Dataset ds = load_split(src, split, a.limit);
    const auto start = std::chrono::steady_clock::now();
    const EvalResult e = evaluate(*m.model, ds, std::max<std::size_t>(1, a.batch_size));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char line[64];
    std::snprintf(line, sizeof line, "accuracy %.4f samples %zu\n", e.accuracy, e.samples);
    std::cout << line << std::flush;
    const fs::path csv = a.csv.empty() ? fs::path(a.checkpoint).parent_path() / "metrics.csv" : fs::path(a.csv);
    append_metrics_row(csv, m.ckpt.epoch, "eval-" + a.split, e.loss, e.accuracy, 0.0, secs);
    return kOk;
}

// --------------------------------------------------------------- attack

struct AttackArgs {
    std::string checkpoint, config, dataset, data_dir, out, attack = "fgsm", name;
    std::vector<double> eps = default_epsilons();
    std::size_t steps = 10, limit = 1000, batch_size = 128;
};

void add_attack(CLI::App& sub, AttackArgs& a) {
    sub.add_option("checkpoint", a.checkpoint, "checkpoint file")->required();
    sub.add_option("--config", a.config);
    sub.add_option("--dataset", a.dataset);
    sub.add_option("--data-dir", a.data_dir);
    sub.add_option("--attack", a.attack)->check(CLI::IsMember({"fgsm", "bim"}));
    sub.add_option("--eps-list", a.eps, "comma-separated epsilons")->delimiter(',');
    sub.add_option("--steps", a.steps, "BIM iterations");
    sub.add_option("--limit", a.limit, "attack the first N test items (0 = all)");
    sub.add_option("--batch-size", a.batch_size);
    sub.add_option("--out", a.out, "robustness CSV (default: next to the checkpoint)");
    sub.add_option("--model-name", a.name);
}

int cmd_attack(const AttackArgs& a) {
    LoadedModel m = load_model(a.checkpoint, a.config);
    const RunConfig src = data_source(m, a.dataset, a.data_dir);
    const Dataset ds = load_split(src, Split::test, a.limit);
    const AttackKind kind = attack_from_string(a.attack);
    const std::string name = a.name.empty() ? "mspcaps-" + src.preset : a.name;
    const RobustnessCurve curve =
        robustness_sweep(*m.model, ds, a.eps, kind, a.steps, std::max<std::size_t>(1, a.batch_size), 0, name);
    for (const auto& p : curve.points) {
        std::cerr << a.attack << " eps " << p.epsilon << " accuracy " << p.accuracy << std::endl;
    }
    const fs::path out = a.out.empty() ? fs::path(a.checkpoint).parent_path() / "robustness.csv" : fs::path(a.out);
    append_robustness_csv(out, curve);
    return kOk;
}

// -------------------------------------------------------------- inspect

struct InspectArgs {
    std::string config, checkpoint;
    ModelFlags model;
};

void add_inspect(CLI::App& sub, InspectArgs& a) {
    auto* cfg = sub.add_option("--config", a.config, "run config JSON");
    auto* ck = sub.add_option("--checkpoint", a.checkpoint);
    cfg->excludes(ck);
    a.model.add(sub);
}

int cmd_inspect(const InspectArgs& a) {
    ModelConfig mc;
    if (!a.checkpoint.empty()) {
        mc = model_config_from_json(load_checkpoint(a.checkpoint).model_json);
    } else {
        RunConfig c = a.config.empty() ? RunConfig{} : load_run_config(a.config);
        a.model.apply(c);
        mc = *resolve(c).model;
    }
    const MSPCaps<float> model(mc, 0);
    std::cout << format_summary(mc, model.summary());
    return kOk;
}

// -------------------------------------------------------------- convert

struct ConvertArgs {
    std::vector<std::string> inputs;
    std::string format = "auto", out, split = "train", name;
};

void add_convert(CLI::App& sub, ConvertArgs& a) {
    sub.add_option("inputs", a.inputs, "IDX image+label files, or CIFAR-10 .bin batches")->required();
    sub.add_option("--format", a.format)->check(CLI::IsMember({"auto", "idx", "cifar-bin"}));
    sub.add_option("--out", a.out, "output prefix; writes <prefix>.mspd and <prefix>.labels")->required();
    sub.add_option("--split", a.split)->check(CLI::IsMember({"train", "test"}));
    sub.add_option("--name", a.name, "dataset name recorded in logs");
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string detect_format(const std::vector<std::string>& inputs) {
    auto all = [&](auto pred) { return std::all_of(inputs.begin(), inputs.end(), pred); };
    if (all([](const std::string& p) { return ends_with(p, "-ubyte") || ends_with(p, ".idx"); })) return "idx";
    if (all([](const std::string& p) { return ends_with(p, ".bin"); })) return "cifar-bin";
    throw FormatError("cannot detect the format of '" + inputs.front() + "'; pass --format idx or cifar-bin");
}

int cmd_convert(const ConvertArgs& a) {
    const std::string format = a.format == "auto" ? detect_format(a.inputs) : a.format;
    const Split split = a.split == "train" ? Split::train : Split::test;
    Dataset ds;
    if (format == "idx") {
        if (a.inputs.size() != 2) throw ConfigError("idx conversion takes an image file and a label file");
        IdxArray first = parse_idx(read_file(a.inputs[0]));
        IdxArray second = parse_idx(read_file(a.inputs[1]));
        if (first.magic != 0x803) std::swap(first, second);
        ds = dataset_from_idx(first, second, a.name.empty() ? "idx" : a.name, split);
    } else {
        for (const auto& path : a.inputs) {
            Dataset part = parse_cifar10_bin(read_file(path), split);
            if (ds.n == 0) {
                ds = std::move(part);
                continue;
            }
            ds.n += part.n;
            ds.images.insert(ds.images.end(), part.images.begin(), part.images.end());
            ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
        }
    }
    const fs::path data = a.out + ".mspd";
    const fs::path labels = a.out + ".labels";
    for (const auto& in : a.inputs) {
        std::error_code ec;
        if (fs::equivalent(in, data, ec) || fs::equivalent(in, labels, ec)) {
            throw ConfigError("output would overwrite input " + in);
        }
    }
    write_mspd(ds, data, labels);
    std::cerr << "wrote " << ds.n << " x " << ds.c << "x" << ds.h << "x" << ds.w << " to " << data.string()
              << std::endl;
    return kOk;
}

int report(const std::string& what, int code) {
    std::cerr << "error: " << what << std::endl;
    return code;
}

}  // namespace

int run(int argc, char** argv) {
    retain_heap_memory();
    CLI::App app{"Multi-scale capsule network: train, evaluate, attack, inspect, convert"};
    app.require_subcommand(1);
    TrainArgs train;
    EvalArgs eval;
    AttackArgs attack;
    InspectArgs inspect;
    ConvertArgs convert;
    auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints and metrics");
    auto* eval_cmd = app.add_subcommand("eval", "accuracy of a checkpoint");
    auto* attack_cmd = app.add_subcommand("attack", "FGSM/BIM robustness sweep of a checkpoint");
    auto* inspect_cmd = app.add_subcommand("inspect", "parameter and capsule report");
    auto* convert_cmd = app.add_subcommand("convert", "convert IDX or CIFAR-10 files to the MSPD container");
    add_train(*train_cmd, train);
    add_eval(*eval_cmd, eval);
    add_attack(*attack_cmd, attack);
    add_inspect(*inspect_cmd, inspect);
    add_convert(*convert_cmd, convert);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (app.got_subcommand(train_cmd)) return cmd_train(train);
        if (app.got_subcommand(eval_cmd)) return cmd_eval(eval);
        if (app.got_subcommand(attack_cmd)) return cmd_attack(attack);
        if (app.got_subcommand(inspect_cmd)) return cmd_inspect(inspect);
        if (app.got_subcommand(convert_cmd)) return cmd_convert(convert);
    } catch (const ConfigError& e) {
        return report(e.what(), kConfigError);
    } catch (const IncompatibleError& e) {
        return report(e.what(), kConfigError);
    } catch (const FormatError& e) {
        return report(e.what(), kDataError);
    } catch (const IoError& e) {
        return report(e.what(), kDataError);
    } catch (const fs::filesystem_error& e) {
        return report(e.what(), kDataError);
    } catch (const NumericError& e) {
        return report(e.what(), kNumericAbort);
    } catch (const std::exception& e) {
        return report(e.what(), kFailure);
    }
    return kFailure;
}

}  // namespace mspcaps::cli
