#include "mspcaps/train.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "mspcaps/capsule.hpp"
#include "mspcaps/errors.hpp"

namespace mspcaps {

namespace fs = std::filesystem;

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), T(0));
        v_.emplace_back(p.tensor.numel(), T(0));
    }
}

template <typename T>
void AdamW<T>::step(double lr) {
    for (const auto& p : params_) {
        if (!p.tensor.has_grad()) {
            throw ContractError("parameter " + p.name + " has no gradient");
        }
    }
    ++t_;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const T decay = static_cast<T>(lr * config_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor<T> tensor = params_[i].tensor;
        auto w = tensor.mutable_data();
        auto g = tensor.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool decayed = params_[i].decay && config_.weight_decay != 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
            if (decayed) w[k] -= decay * w[k];
            m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * g[k]);
            v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * static_cast<double>(g[k]) * g[k]);
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            w[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) {
        Tensor<T> t = p.tensor;
        t.zero_grad();
    }
}

double lr_at(const Schedule& s, std::size_t step) {
    const std::size_t warm = s.warmup_steps();
    if (step < warm) {
        const double frac = static_cast<double>(step) / static_cast<double>(warm);
        return s.base_lr * (s.warmup_start_fraction + (1.0 - s.warmup_start_fraction) * frac);
    }
    const std::size_t total = s.total_steps();
    if (total <= warm + 1) {
        return s.base_lr;
    }
    const double span = static_cast<double>(total - 1 - warm);
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

template <typename T>
EpochMetrics train_epoch(MSPCaps<T>& model, const Dataset& data, AdamW<T>& opt, const Schedule& schedule,
                         const TrainOptions& options, std::size_t epoch, std::uint64_t& global_step) {
    const auto start = std::chrono::steady_clock::now();
    BatchIterator it(data, options.batch_size, options.shuffle_seed, epoch, options.augment);
    Batch batch;
    EpochMetrics m;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t steps = 0;
    while (it.next(batch)) {
        if (batch.size() < 2) continue;
        if (options.max_steps && steps >= options.max_steps) break;
        const double lr = lr_at(schedule, global_step);
        const Tensor<T> x = batch_tensor<T>(batch, data);
        const CapsuleSet<T> out = model.forward(x, Mode::train);
        const Tensor<T> loss = margin_loss(out, batch.labels);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            std::ostringstream msg;
            msg << "non-finite loss " << value << " at step " << global_step << " (epoch " << epoch << ", lr " << lr
                << ")";
            throw NumericError(msg.str());
        }
        loss.backward();
        opt.step(lr);
        opt.zero_grad();
        ++global_step;
        ++steps;
        const std::vector<int> pred = predict(out);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
        loss_sum += value * static_cast<double>(batch.size());
        m.samples += batch.size();
        m.lr = lr;
    }
    if (m.samples > 0) {
        m.loss = loss_sum / static_cast<double>(m.samples);
        m.accuracy = static_cast<double>(correct) / static_cast<double>(m.samples);
    }
    m.seconds = seconds_since(start);
    return m;
}

template <typename T>
EvalResult evaluate(MSPCaps<T>& model, const Dataset& data, std::size_t batch_size, std::size_t limit) {
    NoGradGuard no_grad;
    const Dataset view = limit ? data.head(limit) : Dataset{};
    const Dataset& ds = limit ? view : data;
    BatchIterator it(ds, batch_size);
    Batch batch;
    EvalResult r;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    while (it.next(batch)) {
        const CapsuleSet<T> out = model.forward(batch_tensor<T>(batch, ds), Mode::eval);
        loss_sum += margin_loss(out, batch.labels).item() * static_cast<double>(batch.size());
        const std::vector<int> pred = predict(out);
        for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
        r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
        r.samples += batch.size();
    }
    if (r.samples > 0) {
        r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
        r.loss = loss_sum / static_cast<double>(r.samples);
    }
    return r;
}

namespace {

constexpr char kMagic[4] = {'M', 'S', 'P', 'C'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t> buf;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
    void need(std::size_t n) {
        if (buf.size() - pos < n) {
            throw FormatError("checkpoint truncated at offset " + std::to_string(pos));
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{buf[pos + i]} << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{buf[pos + i]} << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
};

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(Checkpoint::kVersion);
    w.u64(c.fingerprint);
    w.str(c.model_json);
    w.str(c.run_json);
    w.str(c.rng_state);
    w.u64(c.epoch);
    w.u64(c.global_step);
    w.u64(c.adam_steps);
    w.f64(c.best_accuracy);
    w.u32(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
        for (float v : t.data) w.u32(std::bit_cast<std::uint32_t>(v));
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + tmp.string());
        f.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
        if (!f) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    Reader r(bytes);
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("not a checkpoint (bad magic at offset 0): " + path.string());
    }
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != Checkpoint::kVersion) {
        throw IncompatibleError("checkpoint format version " + std::to_string(version) + ", expected " +
                                std::to_string(Checkpoint::kVersion));
    }
    Checkpoint c;
    c.fingerprint = r.u64();
    c.model_json = r.str();
    c.run_json = r.str();
    c.rng_state = r.str();
    c.epoch = r.u64();
    c.global_step = r.u64();
    c.adam_steps = r.u64();
    c.best_accuracy = r.f64();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.str();
        const std::uint32_t rank = r.u32();
        for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.u32());
        const std::size_t n = shape_numel(t.shape);
        r.need(4 * n);
        t.data.resize(n);
        for (std::size_t k = 0; k < n; ++k) t.data[k] = std::bit_cast<float>(r.u32());
        c.tensors.push_back(std::move(t));
    }
    if (r.pos != bytes.size()) {
        throw FormatError("checkpoint has trailing bytes at offset " + std::to_string(r.pos));
    }
    return c;
}

namespace {

template <typename T>
NamedTensor named(const std::string& name, const Shape& shape, std::span<const T> data) {
    return NamedTensor{name, shape, std::vector<float>(data.begin(), data.end())};
}

}  // namespace

template <typename T>
Checkpoint capture_checkpoint(MSPCaps<T>& model, const AdamW<T>* opt) {
    Checkpoint c;
    c.fingerprint = fingerprint(model.config());
    c.model_json = to_json(model.config());
    c.rng_state = rng_state(model.dropout_rng());
    for (const auto& p : model.parameters()) {
        c.tensors.push_back(named<T>(p.name, p.tensor.shape(), p.tensor.data()));
    }
    for (const auto& b : model.buffers()) {
        c.tensors.push_back(named<T>(b.name, b.tensor.shape(), b.tensor.data()));
    }
    if (opt) {
        c.adam_steps = opt->steps();
        const AdamW<T>& o = *opt;
        for (std::size_t i = 0; i < o.params().size(); ++i) {
            const auto& p = o.params()[i];
            c.tensors.push_back(named<T>("adam.m:" + p.name, p.tensor.shape(), std::span<const T>(o.first_moments()[i])));
            c.tensors.push_back(named<T>("adam.v:" + p.name, p.tensor.shape(), std::span<const T>(o.second_moments()[i])));
        }
    }
    return c;
}

template <typename T>
void restore_checkpoint(MSPCaps<T>& model, AdamW<T>* opt, const Checkpoint& c) {
    const std::uint64_t expected = fingerprint(model.config());
    if (c.fingerprint != expected) {
        char buf[80];
        std::snprintf(buf, sizeof buf, "checkpoint fingerprint %016llx does not match model %016llx",
                      static_cast<unsigned long long>(c.fingerprint), static_cast<unsigned long long>(expected));
        throw IncompatibleError(buf);
    }
    std::map<std::string, const NamedTensor*> index;
    for (const auto& t : c.tensors) index[t.name] = &t;
    auto copy_into = [&](const std::string& name, const Shape& shape, std::span<T> dst) {
        auto it = index.find(name);
        if (it == index.end()) {
            throw IncompatibleError("checkpoint lacks tensor " + name);
        }
        if (it->second->shape != shape) {
            throw IncompatibleError("checkpoint tensor " + name + " has shape " + shape_str(it->second->shape) +
                                    ", model expects " + shape_str(shape));
        }
        std::copy(it->second->data.begin(), it->second->data.end(), dst.begin());
    };
    for (auto& p : model.parameters()) {
        copy_into(p.name, p.tensor.shape(), p.tensor.mutable_data());
    }
    for (auto& b : model.buffers()) {
        copy_into(b.name, b.tensor.shape(), b.tensor.mutable_data());
    }
    set_rng_state(model.dropout_rng(), c.rng_state);
    if (opt) {
        for (std::size_t i = 0; i < opt->params().size(); ++i) {
            const auto& p = opt->params()[i];
            copy_into("adam.m:" + p.name, p.tensor.shape(), std::span<T>(opt->first_moments()[i]));
            copy_into("adam.v:" + p.name, p.tensor.shape(), std::span<T>(opt->second_moments()[i]));
        }
        opt->set_steps(c.adam_steps);
    }
}

template <typename T>
Trainer<T>::Trainer(MSPCaps<T>& model, TrainConfig config, const Dataset& train, const Dataset* test,
                    fs::path out_dir, std::string run_json, std::ostream* log)
    : model_(model),
      config_(config),
      train_(train),
      test_(test),
      out_dir_(std::move(out_dir)),
      run_json_(std::move(run_json)),
      log_(log),
      opt_(model.parameters(), AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay}) {
    schedule_.base_lr = config_.lr;
    schedule_.warmup_epochs = config_.warmup_epochs;
    schedule_.total_epochs = config_.epochs;
    schedule_.min_lr = config_.min_lr;
    std::size_t steps = train_.n / config_.batch_size;
    if (train_.n % config_.batch_size >= 2) ++steps;  // single-image tail batches are skipped
    schedule_.steps_per_epoch = std::max<std::size_t>(1, steps);
    if (config_.augment) {
        policy_ = policy_for(train_.name);
    }
    fs::create_directories(out_dir_);
}

template <typename T>
void Trainer<T>::resume(const fs::path& checkpoint) {
    const Checkpoint c = load_checkpoint(checkpoint);
    restore_checkpoint(model_, &opt_, c);
    epoch_ = c.epoch;
    global_step_ = c.global_step;
    best_accuracy_ = c.best_accuracy;
    // Drop metrics rows written after the checkpoint so the file matches an
    // uninterrupted run.
    const fs::path csv = out_dir_ / "metrics.csv";
    std::vector<std::string> kept{kMetricsHeader};
    if (std::ifstream in(csv); in) {
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= epoch_) kept.push_back(line);
        }
    }
    std::ofstream out(csv, std::ios::trunc);
    for (const auto& l : kept) out << l << '\n';
}

void append_metrics_row(const fs::path& csv, std::size_t epoch, const std::string& split, double loss,
                        double accuracy, double lr, double seconds) {
    const bool fresh = !fs::exists(csv);
    std::ofstream out(csv, std::ios::app);
    if (!out) throw IoError("cannot write " + csv.string());
    if (fresh) out << kMetricsHeader << '\n';
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.6f,%.9g,%.3f", epoch, split.c_str(), loss, accuracy, lr, seconds);
    out << buf << '\n';
}

template <typename T>
void Trainer<T>::run(std::optional<std::size_t> until_epoch) {
    const std::size_t stop = std::min(until_epoch.value_or(config_.epochs), config_.epochs);
    if (epoch_ == 0) {
        std::error_code ec;
        fs::remove(out_dir_ / "metrics.csv", ec);
    }
    TrainOptions options;
    options.batch_size = config_.batch_size;
    options.shuffle_seed = config_.shuffle_seed;
    options.augment = config_.augment ? &policy_ : nullptr;
    while (epoch_ < stop) {
        const EpochMetrics m = train_epoch(model_, train_, opt_, schedule_, options, epoch_, global_step_);
        ++epoch_;
        history_.push_back(m);
        append_metrics_row(out_dir_ / "metrics.csv", epoch_, "train", m.loss, m.accuracy, m.lr, m.seconds);
        if (log_) {
            *log_ << "epoch " << epoch_ << "/" << config_.epochs << " train loss " << m.loss << " acc " << m.accuracy
                  << " lr " << m.lr << " (" << m.seconds << " s)" << std::endl;
        }
        double score = m.accuracy;
        if (test_) {
            const auto start = std::chrono::steady_clock::now();
            const EvalResult e = evaluate(model_, *test_, config_.eval_batch_size, config_.eval_limit);
            const double secs = seconds_since(start);
            append_metrics_row(out_dir_ / "metrics.csv", epoch_, "test", e.loss, e.accuracy, m.lr, secs);
            if (log_) {
                *log_ << "epoch " << epoch_ << " test loss " << e.loss << " acc " << e.accuracy << " (" << secs
                      << " s)" << std::endl;
            }
            score = e.accuracy;
        }
        Checkpoint c = capture_checkpoint(model_, &opt_);
        c.run_json = run_json_;
        c.epoch = epoch_;
        c.global_step = global_step_;
        if (score > best_accuracy_) {
            best_accuracy_ = score;
            c.best_accuracy = best_accuracy_;
            save_checkpoint(out_dir_ / "best.ckpt", c);
        }
        c.best_accuracy = best_accuracy_;
        save_checkpoint(out_dir_ / "last.ckpt", c);
    }
}

#define MSPCAPS_INSTANTIATE_TRAIN(T)                                                                          \
    template class AdamW<T>;                                                                                  \
    template EpochMetrics train_epoch(MSPCaps<T>&, const Dataset&, AdamW<T>&, const Schedule&,               \
                                      const TrainOptions&, std::size_t, std::uint64_t&);                     \
    template EvalResult evaluate(MSPCaps<T>&, const Dataset&, std::size_t, std::size_t);                      \
    template Checkpoint capture_checkpoint(MSPCaps<T>&, const AdamW<T>*);                                     \
    template void restore_checkpoint(MSPCaps<T>&, AdamW<T>*, const Checkpoint&);                              \
    template class Trainer<T>;

MSPCAPS_INSTANTIATE_TRAIN(float)
MSPCAPS_INSTANTIATE_TRAIN(double)

}  // namespace mspcaps
