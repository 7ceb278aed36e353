#include "dsp/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "dsp/errors.hpp"
#include "dsp/rng.hpp"

namespace dsp {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803; // 2051
constexpr std::uint32_t kLabelMagic = 0x00000801; // 2049

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw ParseError("failed reading " + path);
    return bytes;
}

std::uint32_t read_u32_be(const std::vector<unsigned char>& bytes, std::size_t offset,
                          const std::string& path) {
    if (offset + 4 > bytes.size()) throw ParseError("truncated header in " + path);
    return (static_cast<std::uint32_t>(bytes[offset]) << 24) |
           (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
           (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) |
           static_cast<std::uint32_t>(bytes[offset + 3]);
}

std::uint64_t fnv1a(const std::vector<unsigned char>& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct IdxImages {
    std::int64_t count = 0, rows = 0, cols = 0;
    std::vector<unsigned char> pixels;
    std::uint64_t checksum = 0;
};

IdxImages parse_images(const std::string& path) {
    const auto bytes = read_file(path);
    const auto magic = read_u32_be(bytes, 0, path);
    if (magic != kImageMagic) {
        throw ParseError(path + ": bad magic " + std::to_string(magic) + ", expected " +
                         std::to_string(kImageMagic) + " (IDX image file)");
    }
    IdxImages out;
    out.count = read_u32_be(bytes, 4, path);
    out.rows = read_u32_be(bytes, 8, path);
    out.cols = read_u32_be(bytes, 12, path);
    const std::size_t expected = 16 + static_cast<std::size_t>(out.count * out.rows * out.cols);
    if (bytes.size() < expected) {
        throw ParseError(path + ": truncated payload, " + std::to_string(bytes.size()) +
                         " bytes for " + std::to_string(out.count) + " images of " +
                         std::to_string(out.rows) + "x" + std::to_string(out.cols));
    }
    out.pixels.assign(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(expected));
    out.checksum = fnv1a(bytes);
    return out;
}

std::vector<std::int64_t> parse_labels(const std::string& path, std::int64_t expected_count) {
    const auto bytes = read_file(path);
    const auto magic = read_u32_be(bytes, 0, path);
    if (magic != kLabelMagic) {
        throw ParseError(path + ": bad magic " + std::to_string(magic) + ", expected " +
                         std::to_string(kLabelMagic) + " (IDX label file)");
    }
    const std::int64_t count = read_u32_be(bytes, 4, path);
    if (count != expected_count) {
        throw DataError(path + ": " + std::to_string(count) + " labels for " +
                        std::to_string(expected_count) + " images");
    }
    if (bytes.size() < 8 + static_cast<std::size_t>(count)) {
        throw ParseError(path + ": truncated payload");
    }
    std::vector<std::int64_t> labels(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        labels[static_cast<std::size_t>(i)] = bytes[8 + static_cast<std::size_t>(i)];
        if (labels[static_cast<std::size_t>(i)] > 9) {
            throw DataError(path + ": label " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                            " out of range at index " + std::to_string(i));
        }
    }
    return labels;
}

Split to_split(const IdxImages& img, const std::vector<std::int64_t>& labels,
               const std::vector<std::int64_t>& order) {
    Split split;
    const std::int64_t pixels = img.rows * img.cols;
    split.images.reserve(order.size());
    split.labels.reserve(order.size());
    for (const std::int64_t i : order) {
        const unsigned char* src = img.pixels.data() + i * pixels;
        std::vector<double> v(static_cast<std::size_t>(pixels));
        for (std::int64_t p = 0; p < pixels; ++p) {
            v[static_cast<std::size_t>(p)] =
                (static_cast<double>(src[p]) / 255.0 - kMnistMean) / kMnistStd;
        }
        split.images.push_back(std::move(v));
        split.labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    return split;
}

} // namespace

DatasetHandle load_mnist(const std::string& dir, std::uint64_t seed) {
    const std::string base = dir.empty() ? "." : dir;
    const auto train_images = parse_images(base + "/train-images-idx3-ubyte");
    const auto train_labels = parse_labels(base + "/train-labels-idx1-ubyte", train_images.count);
    const auto test_images = parse_images(base + "/t10k-images-idx3-ubyte");
    const auto test_labels = parse_labels(base + "/t10k-labels-idx1-ubyte", test_images.count);
    if (train_images.rows != test_images.rows || train_images.cols != test_images.cols) {
        throw DataError("train/test image dimensions differ");
    }

    DatasetHandle handle;
    handle.shuffle_seed = seed;
    handle.sample_shape = {1, train_images.rows, train_images.cols};
    handle.train_images_checksum = train_images.checksum;
    handle.test_images_checksum = test_images.checksum;

    // Validation carved from the training file at 11:1 (55k/5k at 60k scale).
    std::vector<std::int64_t> order(static_cast<std::size_t>(train_images.count));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::stream(seed, rng_stream::kData);
    rng.shuffle(order.begin(), order.end());
    const std::int64_t val_count = train_images.count / 12;
    const std::int64_t train_count = train_images.count - val_count;
    const std::vector<std::int64_t> train_order(order.begin(), order.begin() + train_count);
    const std::vector<std::int64_t> val_order(order.begin() + train_count, order.end());

    handle.train = to_split(train_images, train_labels, train_order);
    handle.val = to_split(train_images, train_labels, val_order);
    std::vector<std::int64_t> test_order(static_cast<std::size_t>(test_images.count));
    std::iota(test_order.begin(), test_order.end(), 0);
    handle.test = to_split(test_images, test_labels, test_order);
    return handle;
}

Tensor make_batch(const Split& split, const std::vector<std::int64_t>& idx,
                  const Shape& sample_shape, std::vector<std::int64_t>& labels_out) {
    const std::int64_t sample = shape_numel(sample_shape);
    std::vector<double> buf(idx.size() * static_cast<std::size_t>(sample));
    labels_out.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& img = split.images[static_cast<std::size_t>(idx[i])];
        if (static_cast<std::int64_t>(img.size()) != sample) {
            throw ShapeError("sample " + std::to_string(idx[i]) + " has " +
                             std::to_string(img.size()) + " values, expected " +
                             std::to_string(sample));
        }
        std::copy(img.begin(), img.end(), buf.begin() + static_cast<std::ptrdiff_t>(i * sample));
        labels_out[i] = split.labels[static_cast<std::size_t>(idx[i])];
    }
    Shape bshape{static_cast<std::int64_t>(idx.size())};
    bshape.insert(bshape.end(), sample_shape.begin(), sample_shape.end());
    return Tensor::from_data(std::move(bshape), std::move(buf));
}

} // namespace dsp
