#include "dsp/model.hpp"

#include <algorithm>
#include <cmath>

#include "dsp/errors.hpp"

namespace dsp {

std::string layer_kind_name(const LayerSpec& spec) {
    return std::visit(
        [](const auto& s) -> std::string {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, ConvLayerSpec>) {
                return "conv";
            } else if constexpr (std::is_same_v<T, BatchNormLayerSpec>) {
                return "batchnorm";
            } else if constexpr (std::is_same_v<T, ReluLayerSpec>) {
                return "relu";
            } else if constexpr (std::is_same_v<T, MaxPoolLayerSpec>) {
                return "maxpool";
            } else if constexpr (std::is_same_v<T, FlattenLayerSpec>) {
                return "flatten";
            } else {
                static_assert(std::is_same_v<T, LinearLayerSpec>);
                return "linear";
            }
        },
        spec);
}

std::vector<Shape> NetworkSpec::infer_shapes() const {
    std::vector<Shape> shapes;
    Shape cur = input_shape; // [C,H,W] or [F] after flatten
    shapes.push_back(cur);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto& layer = layers[li];
        const std::string where = "layer " + std::to_string(li) + " (" + layer_kind_name(layer) + ")";
        if (const auto* conv = std::get_if<ConvLayerSpec>(&layer)) {
            if (cur.size() != 3) throw ShapeError(where + " expects a [C,H,W] input");
            if (conv->in_channels != cur[0]) {
                throw ShapeError(where + " expects " + std::to_string(conv->in_channels) +
                                 " input channels but receives " + std::to_string(cur[0]));
            }
            if (conv->out_channels < 1 || conv->in_channels < 1 || conv->kernel_h < 1 ||
                conv->kernel_w < 1) {
                throw ShapeError(where + " has non-positive dimensions");
            }
            const std::int64_t oh = (cur[1] + 2 * conv->padding - conv->kernel_h) / conv->stride + 1;
            const std::int64_t ow = (cur[2] + 2 * conv->padding - conv->kernel_w) / conv->stride + 1;
            if (oh < 1 || ow < 1) throw ShapeError(where + " output collapses to zero extent");
            cur = {conv->out_channels, oh, ow};
        } else if (const auto* bn = std::get_if<BatchNormLayerSpec>(&layer)) {
            if (cur.size() != 3 || bn->channels != cur[0]) {
                throw ShapeError(where + " expects " + std::to_string(bn->channels) +
                                 " channels but receives " +
                                 (cur.size() == 3 ? std::to_string(cur[0]) : std::string("non-spatial input")));
            }
        } else if (std::get_if<ReluLayerSpec>(&layer)) {
            // shape preserved
        } else if (const auto* pool = std::get_if<MaxPoolLayerSpec>(&layer)) {
            if (cur.size() != 3) throw ShapeError(where + " expects a [C,H,W] input");
            const std::int64_t oh = (cur[1] - pool->kernel) / pool->stride + 1;
            const std::int64_t ow = (cur[2] - pool->kernel) / pool->stride + 1;
            if (oh < 1 || ow < 1) throw ShapeError(where + " window larger than input");
            cur = {cur[0], oh, ow};
        } else if (std::get_if<FlattenLayerSpec>(&layer)) {
            cur = {shape_numel(cur)};
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&layer)) {
            if (cur.size() != 1) throw ShapeError(where + " expects a flattened input");
            if (lin->in_features != cur[0]) {
                throw ShapeError(where + " expects " + std::to_string(lin->in_features) +
                                 " features but receives " + std::to_string(cur[0]));
            }
            cur = {lin->out_features};
        }
        shapes.push_back(cur);
    }
    return shapes;
}

std::vector<std::size_t> NetworkSpec::grouped_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (const auto* conv = std::get_if<ConvLayerSpec>(&layers[i])) {
            if (conv->grouped) out.push_back(i);
        }
    }
    return out;
}

NetworkSpec build_toy_net() {
    NetworkSpec spec;
    spec.input_shape = {1, 28, 28};
    spec.class_count = 10;
    spec.layers = {
        ConvLayerSpec{8, 1, 3, 3, 1, 1, /*has_bias=*/false, /*grouped=*/false},
        BatchNormLayerSpec{8},
        ReluLayerSpec{},
        MaxPoolLayerSpec{2, 2},
        ConvLayerSpec{8, 8, 3, 3, 1, 1, /*has_bias=*/false, /*grouped=*/true},
        BatchNormLayerSpec{8},
        ReluLayerSpec{},
        MaxPoolLayerSpec{2, 2},
        FlattenLayerSpec{},
        LinearLayerSpec{8 * 7 * 7, 10, /*has_bias=*/true},
    };
    spec.validate();
    return spec;
}

CountReport count_dense_params_flops(const NetworkSpec& spec) {
    const auto shapes = spec.infer_shapes();
    CountReport report;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        if (const auto* conv = std::get_if<ConvLayerSpec>(&spec.layers[li])) {
            const auto& out_shape = shapes[li + 1];
            const std::int64_t area = out_shape[1] * out_shape[2];
            const std::int64_t kernel = conv->in_channels * conv->kernel_h * conv->kernel_w;
            report.params += conv->out_channels * kernel + (conv->has_bias ? conv->out_channels : 0);
            report.macs += conv->out_channels * kernel * area;
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&spec.layers[li])) {
            report.params += lin->out_features * lin->in_features +
                             (lin->has_bias ? lin->out_features : 0);
            report.macs += lin->out_features * lin->in_features;
        }
    }
    report.flops = 2 * report.macs;
    return report;
}

Network Network::init(NetworkSpec spec, Rng& rng) {
    spec.validate();
    Network net;
    net.spec = std::move(spec);
    net.state.resize(net.spec.layers.size());
    for (std::size_t li = 0; li < net.spec.layers.size(); ++li) {
        LayerState& st = net.state[li];
        if (const auto* conv = std::get_if<ConvLayerSpec>(&net.spec.layers[li])) {
            const std::int64_t fan_in = conv->in_channels * conv->kernel_h * conv->kernel_w;
            const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
            std::vector<double> w(static_cast<std::size_t>(conv->out_channels * fan_in));
            for (auto& v : w) v = rng.normal() * std_dev;
            st.weight = Tensor::from_data(
                {conv->out_channels, conv->in_channels, conv->kernel_h, conv->kernel_w},
                std::move(w), true);
            if (conv->has_bias) st.bias = Tensor::zeros({conv->out_channels}, true);
        } else if (const auto* bn = std::get_if<BatchNormLayerSpec>(&net.spec.layers[li])) {
            st.gamma = Tensor::full({bn->channels}, 1.0, true);
            st.beta = Tensor::zeros({bn->channels}, true);
            st.running_mean.assign(static_cast<std::size_t>(bn->channels), 0.0);
            st.running_var.assign(static_cast<std::size_t>(bn->channels), 1.0);
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&net.spec.layers[li])) {
            const double std_dev = std::sqrt(2.0 / static_cast<double>(lin->in_features));
            std::vector<double> w(static_cast<std::size_t>(lin->out_features * lin->in_features));
            for (auto& v : w) v = rng.normal() * std_dev;
            st.weight = Tensor::from_data({lin->out_features, lin->in_features}, std::move(w), true);
            if (lin->has_bias) st.bias = Tensor::zeros({lin->out_features}, true);
        }
    }
    return net;
}

Tensor Network::forward(const Tensor& batch, BatchNormMode mode) {
    return forward_with({}, batch, mode);
}

Tensor Network::forward_with(const std::vector<Tensor>& params, const Tensor& batch,
                             BatchNormMode mode) {
    if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != spec.input_shape) {
        throw ShapeError("forward: batch " + shape_to_string(batch.shape()) +
                         " does not match input shape " + shape_to_string(spec.input_shape));
    }
    const bool use_override = !params.empty();
    std::size_t pi = 0;
    auto next_param = [&](const Tensor& own) -> const Tensor& {
        if (!use_override) return own;
        if (pi >= params.size()) throw ContractError("forward_with: too few override parameters");
        return params[pi++];
    };

    Tensor x = batch;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        LayerState& st = state[li];
        if (const auto* conv = std::get_if<ConvLayerSpec>(&spec.layers[li])) {
            const Tensor& w = next_param(st.weight);
            Tensor b;
            if (conv->has_bias) b = next_param(st.bias);
            x = conv2d(x, w, b, conv->stride, conv->padding);
        } else if (std::get_if<BatchNormLayerSpec>(&spec.layers[li])) {
            const Tensor& g = next_param(st.gamma);
            const Tensor& b = next_param(st.beta);
            x = batchnorm2d(x, g, b, st.running_mean, st.running_var, mode);
        } else if (std::get_if<ReluLayerSpec>(&spec.layers[li])) {
            x = relu(x);
        } else if (const auto* pool = std::get_if<MaxPoolLayerSpec>(&spec.layers[li])) {
            x = maxpool2d(x, pool->kernel, pool->stride);
        } else if (std::get_if<FlattenLayerSpec>(&spec.layers[li])) {
            x = flatten(x);
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&spec.layers[li])) {
            const Tensor& w = next_param(st.weight);
            Tensor b;
            if (lin->has_bias) b = next_param(st.bias);
            x = linear(x, w, b);
        }
    }
    if (use_override && pi != params.size()) {
        throw ContractError("forward_with: " + std::to_string(params.size()) +
                            " override parameters for " + std::to_string(pi) + " slots");
    }
    return x;
}

std::vector<Tensor> Network::parameters() {
    std::vector<Tensor> out;
    for (Tensor* slot : parameter_slots()) out.push_back(*slot);
    return out;
}

std::vector<Tensor*> Network::parameter_slots() {
    std::vector<Tensor*> out;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        LayerState& st = state[li];
        if (const auto* conv = std::get_if<ConvLayerSpec>(&spec.layers[li])) {
            out.push_back(&st.weight);
            if (conv->has_bias) out.push_back(&st.bias);
        } else if (std::get_if<BatchNormLayerSpec>(&spec.layers[li])) {
            out.push_back(&st.gamma);
            out.push_back(&st.beta);
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&spec.layers[li])) {
            out.push_back(&st.weight);
            if (lin->has_bias) out.push_back(&st.bias);
        }
    }
    return out;
}

void Network::zero_grad() {
    for (Tensor* slot : parameter_slots()) slot->zero_grad();
}

Network Network::clone() const {
    Network copy;
    copy.spec = spec;
    copy.state.resize(state.size());
    for (std::size_t i = 0; i < state.size(); ++i) {
        const LayerState& src = state[i];
        LayerState& dst = copy.state[i];
        auto dup = [](const Tensor& t) {
            return t.defined() ? Tensor::from_data(t.shape(), t.data(), t.requires_grad()) : Tensor{};
        };
        dst.weight = dup(src.weight);
        dst.bias = dup(src.bias);
        dst.gamma = dup(src.gamma);
        dst.beta = dup(src.beta);
        dst.running_mean = src.running_mean;
        dst.running_var = src.running_var;
    }
    return copy;
}

double evaluate_accuracy(Network& net, const std::vector<std::vector<double>>& images,
                         const std::vector<std::int64_t>& labels, const Shape& sample_shape,
                         std::int64_t batch_size) {
    if (images.size() != labels.size()) {
        throw DataError("evaluate_accuracy: " + std::to_string(images.size()) + " images vs " +
                        std::to_string(labels.size()) + " labels");
    }
    NoGradGuard guard;
    const std::int64_t total = static_cast<std::int64_t>(images.size());
    const std::int64_t sample = shape_numel(sample_shape);
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < total; start += batch_size) {
        const std::int64_t b = std::min(batch_size, total - start);
        std::vector<double> buf(static_cast<std::size_t>(b * sample));
        for (std::int64_t i = 0; i < b; ++i) {
            std::copy(images[start + i].begin(), images[start + i].end(),
                      buf.begin() + i * sample);
        }
        Shape bshape{b};
        bshape.insert(bshape.end(), sample_shape.begin(), sample_shape.end());
        Tensor batch = Tensor::from_data(bshape, std::move(buf));
        Tensor logits = net.forward(batch, BatchNormMode::Eval);
        const std::int64_t classes = logits.dim(1);
        for (std::int64_t i = 0; i < b; ++i) {
            const double* row = logits.data().data() + i * classes;
            std::int64_t arg = 0;
            for (std::int64_t c = 1; c < classes; ++c) {
                if (row[c] > row[arg]) arg = c;
            }
            if (arg == labels[start + i]) ++correct;
        }
    }
    return total > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

} // namespace dsp
