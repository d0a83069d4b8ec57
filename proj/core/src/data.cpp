#include "mspcaps/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "mspcaps/errors.hpp"
#include "mspcaps/parallel.hpp"

namespace mspcaps {

namespace fs = std::filesystem;

const char* to_string(Split split) { return split == Split::train ? "train" : "test"; }

Dataset Dataset::head(std::size_t limit) const {
    if (limit == 0 || limit >= n) {
        return *this;
    }
    Dataset out = *this;
    out.n = limit;
    out.images.resize(limit * image_size());
    out.labels.resize(limit);
    return out;
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

std::uint32_t read_le32(std::span<const std::uint8_t> b, std::size_t off) {
    return std::uint32_t{b[off]} | (std::uint32_t{b[off + 1]} << 8) | (std::uint32_t{b[off + 2]} << 16) |
           (std::uint32_t{b[off + 3]} << 24);
}

void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

[[noreturn]] void truncated(const char* what, std::size_t offset, std::size_t need, std::size_t have) {
    throw FormatError(std::string(what) + " truncated at offset " + std::to_string(offset) + ": need " +
                      std::to_string(need) + " bytes, have " + std::to_string(have));
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) truncated("IDX header", 0, 4, bytes.size());
    IdxArray out;
    out.magic = read_be32(bytes, 0);
    std::size_t rank = 0;
    if (out.magic == 0x00000801) {
        rank = 1;
    } else if (out.magic == 0x00000803) {
        rank = 3;
    } else {
        char buf[16];
        std::snprintf(buf, sizeof buf, "0x%08x", out.magic);
        throw FormatError(std::string("IDX bad magic ") + buf + " at offset 0");
    }
    const std::size_t header = 4 + 4 * rank;
    if (bytes.size() < header) truncated("IDX header", 4, header, bytes.size());
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        out.dims.push_back(read_be32(bytes, 4 + 4 * i));
        count *= out.dims.back();
    }
    if (count == 0) {
        throw FormatError("IDX declares an empty array");
    }
    if (bytes.size() - header < count) truncated("IDX payload", header, header + count, bytes.size());
    if (bytes.size() - header > count) {
        throw FormatError("IDX has " + std::to_string(bytes.size() - header - count) + " trailing bytes at offset " +
                          std::to_string(header + count));
    }
    out.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
    return out;
}

Dataset dataset_from_idx(const IdxArray& images, const IdxArray& labels, std::string name, Split split) {
    if (images.magic != 0x00000803 || labels.magic != 0x00000801) {
        throw FormatError("expected an IDX image file and an IDX label file");
    }
    if (images.dims[0] != labels.dims[0]) {
        throw FormatError("IDX image count " + std::to_string(images.dims[0]) + " differs from label count " +
                          std::to_string(labels.dims[0]));
    }
    Dataset ds;
    ds.name = std::move(name);
    ds.split = split;
    ds.n = images.dims[0];
    ds.c = 1;
    ds.h = images.dims[1];
    ds.w = images.dims[2];
    ds.images.resize(images.values.size());
    for (std::size_t i = 0; i < images.values.size(); ++i) {
        ds.images[i] = static_cast<float>(images.values[i]) / 255.0f;
    }
    ds.labels = labels.values;
    return ds;
}

Dataset parse_cifar10_bin(std::span<const std::uint8_t> bytes, Split split) {
    constexpr std::size_t kPlane = 32 * 32;
    constexpr std::size_t kRecord = 1 + 3 * kPlane;
    if (bytes.empty() || bytes.size() % kRecord != 0) {
        throw FormatError("CIFAR-10 file length " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(kRecord) + "; last full record ends at offset " +
                          std::to_string(bytes.size() / kRecord * kRecord));
    }
    Dataset ds;
    ds.name = "cifar10";
    ds.split = split;
    ds.n = bytes.size() / kRecord;
    ds.c = 3;
    ds.h = 32;
    ds.w = 32;
    ds.images.resize(ds.n * 3 * kPlane);
    ds.labels.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        const std::size_t off = i * kRecord;
        if (bytes[off] > 9) {
            throw FormatError("CIFAR-10 label " + std::to_string(bytes[off]) + " at offset " + std::to_string(off));
        }
        ds.labels[i] = bytes[off];
        for (std::size_t p = 0; p < 3 * kPlane; ++p) {
            ds.images[i * 3 * kPlane + p] = static_cast<float>(bytes[off + 1 + p]) / 255.0f;
        }
    }
    return ds;
}

Dataset parse_mspd(std::span<const std::uint8_t> data, std::span<const std::uint8_t> labels, std::string name,
                   Split split) {
    if (data.size() < 20) truncated("MSPD header", 0, 20, data.size());
    if (std::memcmp(data.data(), "MSPD", 4) != 0) {
        throw FormatError("MSPD bad magic at offset 0");
    }
    Dataset ds;
    ds.name = std::move(name);
    ds.split = split;
    ds.n = read_le32(data, 4);
    ds.c = read_le32(data, 8);
    ds.h = read_le32(data, 12);
    ds.w = read_le32(data, 16);
    const std::size_t count = ds.n * ds.image_size();
    if (count == 0) {
        throw FormatError("MSPD declares an empty array");
    }
    if ((data.size() - 20) / 4 < count || (data.size() - 20) % 4 != 0) {
        truncated("MSPD payload", 20, 20 + 4 * count, data.size());
    }
    if (data.size() - 20 != 4 * count) {
        throw FormatError("MSPD has trailing bytes at offset " + std::to_string(20 + 4 * count));
    }
    if (labels.size() != ds.n) {
        throw FormatError("MSPD labels file has " + std::to_string(labels.size()) + " bytes for " +
                          std::to_string(ds.n) + " images");
    }
    ds.images.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        ds.images[i] = std::bit_cast<float>(read_le32(data, 20 + 4 * i));
    }
    ds.labels.assign(labels.begin(), labels.end());
    return ds;
}

std::vector<std::uint8_t> encode_mspd(const Dataset& ds) {
    std::vector<std::uint8_t> out{'M', 'S', 'P', 'D'};
    out.reserve(20 + 4 * ds.images.size());
    put_le32(out, static_cast<std::uint32_t>(ds.n));
    put_le32(out, static_cast<std::uint32_t>(ds.c));
    put_le32(out, static_cast<std::uint32_t>(ds.h));
    put_le32(out, static_cast<std::uint32_t>(ds.w));
    for (float v : ds.images) put_le32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

namespace {
void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + path.string());
}
}  // namespace

void write_mspd(const Dataset& ds, const fs::path& data_path, const fs::path& labels_path) {
    write_bytes(data_path, encode_mspd(ds));
    write_bytes(labels_path, ds.labels);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

Dataset pad_to(const Dataset& ds, std::size_t size) {
    if (ds.h > size || ds.w > size) {
        throw ShapeError("cannot pad " + std::to_string(ds.h) + "x" + std::to_string(ds.w) + " images to " +
                         std::to_string(size));
    }
    if (ds.h == size && ds.w == size) return ds;
    const std::size_t top = (size - ds.h) / 2;
    const std::size_t left = (size - ds.w) / 2;
    Dataset out = ds;
    out.h = size;
    out.w = size;
    out.images.assign(ds.n * ds.c * size * size, 0.0f);
    for (std::size_t p = 0; p < ds.n * ds.c; ++p) {
        for (std::size_t y = 0; y < ds.h; ++y) {
            const float* src = ds.images.data() + (p * ds.h + y) * ds.w;
            std::copy(src, src + ds.w, out.images.data() + (p * size + top + y) * size + left);
        }
    }
    return out;
}

AugmentPolicy policy_for(const std::string& dataset) {
    AugmentPolicy p;
    if (dataset == "mnist") {
        p.resize_to = 32;
        p.rotation_deg = 15.0;
    } else if (dataset == "fashion-mnist") {
        p.resize_to = 32;
        p.hflip = true;
        p.crop_pad = 4;
    } else if (dataset == "svhn") {
        p.rotation_deg = 15.0;
        p.crop_pad = 4;
    } else if (dataset == "cifar10") {
        p.hflip = true;
        p.crop_pad = 4;
        p.normalize_mean = {0.4914, 0.4822, 0.4465};
        p.normalize_std = {0.2023, 0.1994, 0.2010};
    } else {
        throw ConfigError("unknown dataset '" + dataset + "' (expected mnist, fashion-mnist, svhn or cifar10)");
    }
    return p;
}

namespace {

void rotate(std::span<float> image, std::size_t c, std::size_t h, std::size_t w, double deg) {
    const double rad = deg * std::numbers::pi / 180.0;
    const double cs = std::cos(rad);
    const double sn = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    std::vector<float> src(image.begin(), image.end());
    auto at = [&](std::size_t ch, long y, long x) -> double {
        if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
        return src[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
    };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            // Inverse map each output pixel into the source image.
            const double dy = static_cast<double>(y) - cy;
            const double dx = static_cast<double>(x) - cx;
            const double sx = cs * dx + sn * dy + cx;
            const double sy = -sn * dx + cs * dy + cy;
            const long x0 = static_cast<long>(std::floor(sx));
            const long y0 = static_cast<long>(std::floor(sy));
            const double fx = sx - static_cast<double>(x0);
            const double fy = sy - static_cast<double>(y0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = (1 - fy) * ((1 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1)) +
                                 fy * ((1 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
                image[(ch * h + y) * w + x] = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
            }
        }
    }
}

std::size_t draw_index(Rng& rng, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

}  // namespace

void augment(std::span<float> image, std::size_t c, std::size_t h, std::size_t w, const AugmentPolicy& policy,
             Rng& rng, AugmentDraw* draw) {
    if (image.size() != c * h * w) {
        throw ShapeError("augment: image buffer does not match " + std::to_string(c) + "x" + std::to_string(h) + "x" +
                         std::to_string(w));
    }
    AugmentDraw d;
    if (policy.rotation_deg > 0.0) {
        d.angle_deg = (2.0 * uniform01(rng) - 1.0) * policy.rotation_deg;
        rotate(image, c, h, w, d.angle_deg);
    }
    if (policy.crop_pad > 0) {
        const std::size_t pad = policy.crop_pad;
        d.crop_y = draw_index(rng, 2 * pad + 1);
        d.crop_x = draw_index(rng, 2 * pad + 1);
        std::vector<float> src(image.begin(), image.end());
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                // Row y of the crop is row y + crop_y - pad of the original.
                const long sy = static_cast<long>(y + d.crop_y) - static_cast<long>(pad);
                for (std::size_t x = 0; x < w; ++x) {
                    const long sx = static_cast<long>(x + d.crop_x) - static_cast<long>(pad);
                    const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
                    image[(ch * h + y) * w + x] =
                        inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0f;
                }
            }
        }
    }
    if (policy.hflip) {
        d.flipped = uniform01(rng) < 0.5;
        if (d.flipped) {
            for (std::size_t row = 0; row < c * h; ++row) {
                std::reverse(image.begin() + static_cast<std::ptrdiff_t>(row * w),
                             image.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
            }
        }
    }
    if (draw) *draw = d;
}

void normalize(std::span<float> image, std::size_t c, const std::vector<double>& mean, const std::vector<double>& std) {
    const std::size_t plane = image.size() / c;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double m = mean.size() == 1 ? mean[0] : mean.at(ch);
        const double s = std.size() == 1 ? std[0] : std.at(ch);
        for (std::size_t i = 0; i < plane; ++i) {
            float& v = image[ch * plane + i];
            v = static_cast<float>((v - m) / s);
        }
    }
}

Dataset load_dataset(const std::string& name, const fs::path& root, Split split) {
    const bool train = split == Split::train;
    Dataset ds;
    if (name == "mnist" || name == "fashion-mnist") {
        const fs::path dir = root / name;
        const std::string stem = train ? "train" : "t10k";
        const IdxArray images = parse_idx(read_file(dir / (stem + "-images-idx3-ubyte")));
        const IdxArray labels = parse_idx(read_file(dir / (stem + "-labels-idx1-ubyte")));
        ds = dataset_from_idx(images, labels, name, split);
    } else if (name == "cifar10") {
        const fs::path dir = root / "cifar10";
        if (train) {
            for (int b = 1; b <= 5; ++b) {
                Dataset part =
                    parse_cifar10_bin(read_file(dir / ("data_batch_" + std::to_string(b) + ".bin")), split);
                if (ds.n == 0) {
                    ds = std::move(part);
                } else {
                    ds.n += part.n;
                    ds.images.insert(ds.images.end(), part.images.begin(), part.images.end());
                    ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
                }
            }
        } else {
            ds = parse_cifar10_bin(read_file(dir / "test_batch.bin"), split);
        }
    } else if (name == "svhn") {
        const fs::path dir = root / "svhn";
        const std::string stem = train ? "train" : "test";
        ds = parse_mspd(read_file(dir / (stem + ".mspd")), read_file(dir / (stem + ".labels")), name, split);
    } else {
        throw ConfigError("unknown dataset '" + name + "'");
    }
    const AugmentPolicy policy = policy_for(name);
    if (policy.resize_to) {
        ds = pad_to(ds, *policy.resize_to);
    }
    return ds;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, epoch));
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[draw_index(rng, i)]);
    }
    return order;
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                             std::uint64_t epoch, const AugmentPolicy* policy)
    : ds_(ds), batch_size_(batch_size), seed_(shuffle_seed.value_or(0)), epoch_(epoch), policy_(policy) {
    if (batch_size == 0) {
        throw ContractError("batch size must be >= 1");
    }
    if (shuffle_seed) {
        order_ = shuffled_order(ds.n, *shuffle_seed, epoch);
    } else {
        order_.resize(ds.n);
        for (std::size_t i = 0; i < ds.n; ++i) order_[i] = i;
    }
}

std::size_t BatchIterator::num_batches() const { return (ds_.n + batch_size_ - 1) / batch_size_; }

bool BatchIterator::next(Batch& batch) {
    if (pos_ >= order_.size()) return false;
    const std::size_t count = std::min(batch_size_, order_.size() - pos_);
    const std::size_t sz = ds_.image_size();
    batch.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                         order_.begin() + static_cast<std::ptrdiff_t>(pos_ + count));
    batch.images.resize(count * sz);
    batch.labels.resize(count);
    pos_ += count;
    parallel_for(count, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t idx = batch.indices[i];
            auto src = ds_.image(idx);
            std::span<float> dst(batch.images.data() + i * sz, sz);
            std::copy(src.begin(), src.end(), dst.begin());
            batch.labels[i] = ds_.labels[idx];
            if (policy_) {
                Rng rng(mix_seed(seed_, epoch_, idx, 1));
                augment(dst, ds_.c, ds_.h, ds_.w, *policy_, rng);
            }
        }
    });
    return true;
}

template <typename T>
Tensor<T> batch_tensor(const Batch& batch, const Dataset& ds) {
    std::vector<T> v(batch.images.begin(), batch.images.end());
    return Tensor<T>({batch.size(), ds.c, ds.h, ds.w}, std::move(v));
}

template Tensor<float> batch_tensor(const Batch&, const Dataset&);
template Tensor<double> batch_tensor(const Batch&, const Dataset&);

}  // namespace mspcaps
