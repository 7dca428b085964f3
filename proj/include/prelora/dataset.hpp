#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "prelora/tensor.hpp"

namespace prelora {

/// Gaussian clusters around random class centers.
struct SyntheticSpec {
    std::size_t num_examples = 1024;
    int input_dim = 64;
    int num_classes = 10;
    std::uint64_t seed = 7;
    double center_scale = 1.0;  // stddev of class-center coordinates
    double cluster_std = 1.0;   // stddev of per-example noise
    double label_noise = 0.0;   // fraction of labels resampled uniformly

    bool operator==(const SyntheticSpec&) const = default;
};

/// Standard IDX image/label file pair (MNIST layout).
struct IdxSpec {
    std::string images_path;
    std::string labels_path;
    std::size_t limit = 0;  // 0 = all
    int num_classes = 10;

    bool operator==(const IdxSpec&) const = default;
};

using DatasetSpec = std::variant<SyntheticSpec, IdxSpec>;

class IdxFormatError : public Error {
public:
    using Error::Error;
};

struct Batch {
    Tensor inputs;
    std::vector<std::size_t> labels;
};

class Dataset {
public:
    Dataset(std::size_t input_dim, int num_classes, std::vector<double> features, std::vector<std::size_t> labels);

    std::size_t size() const noexcept { return labels_.size(); }
    std::size_t input_dim() const noexcept { return input_dim_; }
    int num_classes() const noexcept { return num_classes_; }
    std::span<const double> features(std::size_t i) const;
    std::size_t label(std::size_t i) const { return labels_.at(i); }
    std::span<const std::size_t> labels() const noexcept { return labels_; }

    Batch gather(std::span<const std::size_t> indices) const;

    bool operator==(const Dataset&) const = default;

private:
    std::size_t input_dim_;
    int num_classes_;
    std::vector<double> features_;
    std::vector<std::size_t> labels_;
};

Dataset make_synthetic(const SyntheticSpec& spec);

struct IdxImageHeader {
    std::uint32_t count = 0;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

IdxImageHeader parse_idx_image_header(std::span<const std::uint8_t> bytes);
/// Pixels normalized to [0,1], images flattened row-major.
std::vector<double> parse_idx_images(std::span<const std::uint8_t> bytes, IdxImageHeader* header = nullptr);
std::vector<std::size_t> parse_idx_labels(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
Dataset load_idx(const IdxSpec& spec);
Dataset load_dataset(const DatasetSpec& spec);

/// Feature width a spec will produce; for IDX this reads the image header.
std::size_t dataset_input_dim(const DatasetSpec& spec);
int dataset_num_classes(const DatasetSpec& spec);

}  // namespace prelora
