#include "prelora/dataset.hpp"

#include <fstream>
#include <random>

namespace prelora {

Dataset::Dataset(std::size_t input_dim, int num_classes, std::vector<double> features, std::vector<std::size_t> labels)
    : input_dim_(input_dim), num_classes_(num_classes), features_(std::move(features)), labels_(std::move(labels)) {
    if (input_dim_ == 0 || num_classes_ <= 0) throw Error("dataset: input_dim and num_classes must be positive");
    if (features_.size() != labels_.size() * input_dim_)
        throw Error("dataset: " + std::to_string(features_.size()) + " feature values for " +
                    std::to_string(labels_.size()) + " examples of width " + std::to_string(input_dim_));
    for (std::size_t y : labels_)
        if (y >= static_cast<std::size_t>(num_classes_))
            throw Error("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes_) + ")");
}

std::span<const double> Dataset::features(std::size_t i) const {
    if (i >= size()) throw Error("dataset: example index out of range");
    return std::span<const double>(features_).subspan(i * input_dim_, input_dim_);
}

Batch Dataset::gather(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw Error("dataset: empty batch");
    Batch b{Tensor({indices.size(), input_dim_}), {}};
    b.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto row = features(indices[r]);
        std::copy(row.begin(), row.end(), b.inputs.data().begin() + static_cast<std::ptrdiff_t>(r * input_dim_));
        b.labels.push_back(labels_[indices[r]]);
    }
    return b;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
    if (spec.num_examples == 0 || spec.input_dim <= 0 || spec.num_classes <= 0)
        throw Error("synthetic dataset: num_examples, input_dim and num_classes must be positive");
    const auto dim = static_cast<std::size_t>(spec.input_dim);
    const auto classes = static_cast<std::size_t>(spec.num_classes);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_class(0, classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<double> centers(classes * dim);
    for (double& c : centers) c = spec.center_scale * normal(rng);

    std::vector<double> features(spec.num_examples * dim);
    std::vector<std::size_t> labels(spec.num_examples);
    for (std::size_t i = 0; i < spec.num_examples; ++i) {
        const std::size_t y = pick_class(rng);
        for (std::size_t j = 0; j < dim; ++j) features[i * dim + j] = centers[y * dim + j] + spec.cluster_std * normal(rng);
        labels[i] = y;
        if (spec.label_noise > 0.0 && unit(rng) < spec.label_noise) labels[i] = pick_class(rng);
    }
    return Dataset(dim, spec.num_classes, std::move(features), std::move(labels));
}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", v);
    return buf;
}

}  // namespace

IdxImageHeader parse_idx_image_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) throw IdxFormatError("idx images: truncated header (" + std::to_string(bytes.size()) + " bytes)");
    const std::uint32_t magic = read_be32(bytes, 0);
    if (magic != kIdxImageMagic)
        throw IdxFormatError("idx images: bad magic " + hex32(magic) + ", expected " + hex32(kIdxImageMagic));
    IdxImageHeader h{read_be32(bytes, 4), read_be32(bytes, 8), read_be32(bytes, 12)};
    if (h.count == 0 || h.rows == 0 || h.cols == 0) throw IdxFormatError("idx images: zero dimension in header");
    return h;
}

std::vector<double> parse_idx_images(std::span<const std::uint8_t> bytes, IdxImageHeader* header) {
    const IdxImageHeader h = parse_idx_image_header(bytes);
    const std::size_t pixels = std::size_t{h.count} * h.rows * h.cols;
    if (bytes.size() - 16 != pixels)
        throw IdxFormatError("idx images: header promises " + std::to_string(pixels) + " pixels, file holds " +
                             std::to_string(bytes.size() - 16));
    std::vector<double> out(pixels);
    for (std::size_t i = 0; i < pixels; ++i) out[i] = bytes[16 + i] / 255.0;
    if (header) *header = h;
    return out;
}

std::vector<std::size_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw IdxFormatError("idx labels: truncated header (" + std::to_string(bytes.size()) + " bytes)");
    const std::uint32_t magic = read_be32(bytes, 0);
    if (magic != kIdxLabelMagic)
        throw IdxFormatError("idx labels: bad magic " + hex32(magic) + ", expected " + hex32(kIdxLabelMagic));
    const std::uint32_t count = read_be32(bytes, 4);
    if (bytes.size() - 8 != count)
        throw IdxFormatError("idx labels: header promises " + std::to_string(count) + " labels, file holds " +
                             std::to_string(bytes.size() - 8));
    return std::vector<std::size_t>(bytes.begin() + 8, bytes.end());
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Dataset load_idx(const IdxSpec& spec) {
    IdxImageHeader h;
    auto pixels = parse_idx_images(read_file_bytes(spec.images_path), &h);
    auto labels = parse_idx_labels(read_file_bytes(spec.labels_path));
    if (labels.size() != h.count)
        throw IdxFormatError("idx: " + std::to_string(h.count) + " images but " + std::to_string(labels.size()) + " labels");
    const std::size_t dim = std::size_t{h.rows} * h.cols;
    if (spec.limit > 0 && spec.limit < labels.size()) {
        labels.resize(spec.limit);
        pixels.resize(spec.limit * dim);
    }
    return Dataset(dim, spec.num_classes, std::move(pixels), std::move(labels));
}

Dataset load_dataset(const DatasetSpec& spec) {
    if (const auto* s = std::get_if<SyntheticSpec>(&spec)) return make_synthetic(*s);
    return load_idx(std::get<IdxSpec>(spec));
}

std::size_t dataset_input_dim(const DatasetSpec& spec) {
    if (const auto* s = std::get_if<SyntheticSpec>(&spec)) return static_cast<std::size_t>(s->input_dim);
    const auto& idx = std::get<IdxSpec>(spec);
    std::ifstream in(idx.images_path, std::ios::binary);
    if (!in) throw Error("data.images_path: cannot open '" + idx.images_path + "'");
    std::vector<std::uint8_t> head(16);
    in.read(reinterpret_cast<char*>(head.data()), 16);
    head.resize(static_cast<std::size_t>(in.gcount()));
    const auto h = parse_idx_image_header(head);
    return std::size_t{h.rows} * h.cols;
}

int dataset_num_classes(const DatasetSpec& spec) {
    if (const auto* s = std::get_if<SyntheticSpec>(&spec)) return s->num_classes;
    return std::get<IdxSpec>(spec).num_classes;
}

}  // namespace prelora
