#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsp/tensor.hpp"

namespace dsp {

struct Split {
    std::vector<std::vector<double>> images; // normalized, flattened per sample
    std::vector<std::int64_t> labels;

    std::size_t size() const { return images.size(); }
};

// MNIST normalization constants.
inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

struct DatasetHandle {
    Split train;
    Split val;
    Split test;
    Shape sample_shape;   // [1, 28, 28]
    double norm_mean = kMnistMean;
    double norm_std = kMnistStd;
    std::uint64_t shuffle_seed = 0;
    std::uint64_t train_images_checksum = 0; // FNV-1a of the raw image file
    std::uint64_t test_images_checksum = 0;
};

// Loads the four canonical IDX files from `dir`. The training file is split
// into train/validation at an 11:1 ratio (55k/5k at full MNIST scale) using a
// shuffle derived from `seed`; the same seed always yields the same split and
// batch order downstream.
DatasetHandle load_mnist(const std::string& dir, std::uint64_t seed);

// Assembles samples picked by `idx` into a [B, ...sample_shape] tensor.
Tensor make_batch(const Split& split, const std::vector<std::int64_t>& idx,
                  const Shape& sample_shape, std::vector<std::int64_t>& labels_out);

} // namespace dsp
