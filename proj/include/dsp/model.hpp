#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dsp/ops.hpp"
#include "dsp/rng.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

struct ConvLayerSpec {
    std::int64_t out_channels = 0;
    std::int64_t in_channels = 0;
    std::int64_t kernel_h = 0;
    std::int64_t kernel_w = 0;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    bool has_bias = false;
    bool grouped = false; // participates in filter-group learning and pruning
};

struct BatchNormLayerSpec {
    std::int64_t channels = 0;
};

struct ReluLayerSpec {};

struct MaxPoolLayerSpec {
    std::int64_t kernel = 2;
    std::int64_t stride = 2;
};

struct FlattenLayerSpec {};

struct LinearLayerSpec {
    std::int64_t in_features = 0;
    std::int64_t out_features = 0;
    bool has_bias = true;
};

using LayerSpec = std::variant<ConvLayerSpec, BatchNormLayerSpec, ReluLayerSpec, MaxPoolLayerSpec,
                               FlattenLayerSpec, LinearLayerSpec>;

std::string layer_kind_name(const LayerSpec& spec);

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    std::int64_t class_count = 0;
    Shape input_shape; // [C, H, W]

    // Shape of each layer's input, plus the final output shape at the back.
    // Throws ShapeError when adjacent layers do not compose.
    std::vector<Shape> infer_shapes() const;
    void validate() const { infer_shapes(); }

    std::vector<std::size_t> grouped_layers() const;
};

// Two conv blocks (8 output channels each, batchnorm + relu + pool) and a
// linear classifier; the second conv is the grouped layer.
NetworkSpec build_toy_net();

struct CountReport {
    std::int64_t params = 0;
    std::int64_t flops = 0; // 2 per multiply-accumulate
    std::int64_t macs = 0;
};

// Conv and linear layers only; batchnorm/relu/pool excluded.
CountReport count_dense_params_flops(const NetworkSpec& spec);

// Per-layer parameter and buffer storage; slot count mirrors spec.layers.
struct LayerState {
    Tensor weight;
    Tensor bias;
    Tensor gamma;
    Tensor beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

// A NetworkSpec plus its weights. The spec is immutable after construction;
// weights are mutated only by the owning training thread.
struct Network {
    NetworkSpec spec;
    std::vector<LayerState> state;

    static Network init(NetworkSpec spec, Rng& rng); // Kaiming fan-in normal

    Tensor forward(const Tensor& batch, BatchNormMode mode);
    Tensor forward_with(const std::vector<Tensor>& params, const Tensor& batch, BatchNormMode mode);

    std::vector<Tensor> parameters();         // grad-bearing tensors, fixed order
    std::vector<Tensor*> parameter_slots();   // mutable slots in the same order
    void zero_grad();

    Network clone() const; // deep copy of values and buffers
};

// Accuracy (in percent) of argmax predictions over an evaluation set.
double evaluate_accuracy(Network& net, const std::vector<std::vector<double>>& images,
                         const std::vector<std::int64_t>& labels, const Shape& sample_shape,
                         std::int64_t batch_size = 256);

} // namespace dsp
