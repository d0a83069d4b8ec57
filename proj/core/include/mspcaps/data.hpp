#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mspcaps/rng.hpp"
#include "mspcaps/tensor.hpp"

namespace mspcaps {

enum class Split { train, test };

const char* to_string(Split split);

/// Images in [0,1], N x C x H x W row-major, with one label per image.
struct Dataset {
    std::string name;
    Split split = Split::train;
    std::size_t n = 0, c = 0, h = 0, w = 0;
    std::vector<float> images;
    std::vector<std::uint8_t> labels;

    std::size_t image_size() const { return c * h * w; }
    std::span<const float> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }
    /// The first `limit` items (all of them when limit is 0 or >= n).
    Dataset head(std::size_t limit) const;
};

/// IDX container: big-endian magic 0x00000801 (u8 labels) or 0x00000803
/// (u8 images), then one u32 per dimension.
struct IdxArray {
    std::uint32_t magic = 0;
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> values;
};

IdxArray parse_idx(std::span<const std::uint8_t> bytes);

/// Combines an IDX image file and label file into a single-channel dataset.
Dataset dataset_from_idx(const IdxArray& images, const IdxArray& labels, std::string name, Split split);

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes in
/// R, G, B planes of 32 x 32.
Dataset parse_cifar10_bin(std::span<const std::uint8_t> bytes, Split split);

/// Raw container. Data file: "MSPD", u32 N, C, H, W (little-endian), then
/// N*C*H*W little-endian float32. Labels file: N bytes.
Dataset parse_mspd(std::span<const std::uint8_t> data, std::span<const std::uint8_t> labels, std::string name,
                   Split split);
std::vector<std::uint8_t> encode_mspd(const Dataset& ds);
void write_mspd(const Dataset& ds, const std::filesystem::path& data_path, const std::filesystem::path& labels_path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Zero-pads every image symmetrically up to size x size.
Dataset pad_to(const Dataset& ds, std::size_t size);

struct AugmentPolicy {
    std::optional<std::size_t> resize_to;  // by zero padding
    double rotation_deg = 0.0;             // uniform in [-deg, deg]
    bool hflip = false;
    std::size_t crop_pad = 0;
    std::vector<double> normalize_mean{0.5};
    std::vector<double> normalize_std{0.5};
};

/// Preprocessing recipe for mnist, fashion-mnist, svhn and cifar10.
AugmentPolicy policy_for(const std::string& dataset);

/// Draws recorded for one augmented image.
struct AugmentDraw {
    double angle_deg = 0.0;
    std::size_t crop_y = 0, crop_x = 0;
    bool flipped = false;
};

/// Rotation (bilinear, zero fill), padded random crop, then horizontal flip,
/// in place on one C x H x W image. Normalization is not applied here.
void augment(std::span<float> image, std::size_t c, std::size_t h, std::size_t w, const AugmentPolicy& policy,
             Rng& rng, AugmentDraw* draw = nullptr);

/// (x - mean[c]) / std[c] per channel.
void normalize(std::span<float> image, std::size_t c, const std::vector<double>& mean, const std::vector<double>& std);

/// Reads a dataset by name from `root` (mnist/, fashion-mnist/, cifar10/,
/// or svhn/ holding {train,test}.mspd + .labels). MNIST-style sets are
/// padded to the policy's resize target.
Dataset load_dataset(const std::string& name, const std::filesystem::path& root, Split split);

struct Batch {
    std::vector<std::size_t> indices;
    std::vector<float> images;
    std::vector<int> labels;
    std::size_t size() const { return indices.size(); }
};

/// Seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Batches over a dataset. With a shuffle seed the order is a fresh
/// permutation per epoch; with a policy every item is augmented from its own
/// (seed, epoch, index) stream. The final partial batch is kept.
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed = std::nullopt,
                  std::uint64_t epoch = 0, const AugmentPolicy* policy = nullptr);

    bool next(Batch& batch);
    std::size_t num_batches() const;

private:
    const Dataset& ds_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t epoch_;
    const AugmentPolicy* policy_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

template <typename T>
Tensor<T> batch_tensor(const Batch& batch, const Dataset& ds);

}  // namespace mspcaps
