#include "dsp/compile.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>

#include "dsp/errors.hpp"

namespace dsp {

namespace {

std::optional<const GroupedLayerPruning*> grouped_entry(const PrunedStructure& s, std::size_t li) {
    for (const auto& layer : s.grouped) {
        if (layer.layer_index == li) return &layer;
    }
    return std::nullopt;
}

std::optional<const DenseLayerPruning*> dense_entry(const PrunedStructure& s, std::size_t li) {
    for (const auto& layer : s.dense) {
        if (layer.layer_index == li) return &layer;
    }
    return std::nullopt;
}

Tensor slice_conv_weight(const Tensor& weight, const std::vector<std::int64_t>& filters,
                         const std::vector<std::int64_t>& channels) {
    const std::int64_t cin = weight.dim(1), kernel = weight.dim(2) * weight.dim(3);
    std::vector<double> out(filters.size() * channels.size() * static_cast<std::size_t>(kernel));
    const double* w = weight.data().data();
    std::size_t o = 0;
    for (const auto k : filters) {
        for (const auto m : channels) {
            std::memcpy(out.data() + o, w + (k * cin + m) * kernel,
                        static_cast<std::size_t>(kernel) * sizeof(double));
            o += static_cast<std::size_t>(kernel);
        }
    }
    return Tensor::from_data({static_cast<std::int64_t>(filters.size()),
                              static_cast<std::int64_t>(channels.size()), weight.dim(2),
                              weight.dim(3)},
                             std::move(out), true);
}

std::vector<double> gather_values(const std::vector<double>& src,
                                  const std::vector<std::int64_t>& idx) {
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = src[static_cast<std::size_t>(idx[i])];
    return out;
}

Tensor gather_vector(const Tensor& src, const std::vector<std::int64_t>& idx) {
    return Tensor::from_data({static_cast<std::int64_t>(idx.size())}, gather_values(src.data(), idx),
                             true);
}

// position of each wanted id within the current channel map
std::vector<std::int64_t> positions_in(const std::vector<std::int64_t>& map,
                                       const std::vector<std::int64_t>& wanted,
                                       std::size_t layer_index, std::size_t group_index) {
    std::vector<std::int64_t> out;
    out.reserve(wanted.size());
    for (const auto id : wanted) {
        const auto it = std::find(map.begin(), map.end(), id);
        if (it == map.end()) {
            throw StructureError("layer " + std::to_string(layer_index) + " group " +
                                 std::to_string(group_index) + ": gather channel " +
                                 std::to_string(id) + " not produced upstream");
        }
        out.push_back(static_cast<std::int64_t>(it - map.begin()));
    }
    return out;
}

} // namespace

CompiledModel compile(const Network& net, const PrunedStructure& structure) {
    net.spec.validate();
    CompiledModel model;
    model.input_shape = net.spec.input_shape;
    model.class_count = net.spec.class_count;
    model.meta.beta = structure.beta;
    model.meta.groups = structure.group_count;
    const auto dense_counts = count_dense_params_flops(net.spec);
    model.meta.dense_params = dense_counts.params;
    model.meta.dense_flops = dense_counts.flops;

    const auto shapes = net.spec.infer_shapes();

    std::vector<std::int64_t> channel_map(static_cast<std::size_t>(net.spec.input_shape[0]));
    for (std::size_t i = 0; i < channel_map.size(); ++i) channel_map[i] = static_cast<std::int64_t>(i);

    for (std::size_t li = 0; li < net.spec.layers.size(); ++li) {
        const LayerState& st = net.state[li];
        if (const auto* conv = std::get_if<ConvLayerSpec>(&net.spec.layers[li])) {
            const auto grouped = grouped_entry(structure, li);
            if (grouped) {
                const GroupedLayerPruning& gp = **grouped;
                if (gp.dense_filters != conv->out_channels || gp.dense_channels != conv->in_channels) {
                    throw StructureError("layer " + std::to_string(li) +
                                         ": structure recorded for a different layer width");
                }
                CompiledGroupedConv layer;
                layer.stride = conv->stride;
                layer.padding = conv->padding;
                std::vector<std::int64_t> new_map;
                for (std::size_t g = 0; g < gp.groups.size(); ++g) {
                    const PrunedGroup& group = gp.groups[g];
                    if (group.filters.empty() || group.gather.empty()) {
                        throw StructureError("layer " + std::to_string(li) + " group " +
                                             std::to_string(g) + ": empty group in structure");
                    }
                    layer.weights.push_back(slice_conv_weight(st.weight, group.filters, group.gather));
                    layer.gather.push_back(positions_in(channel_map, group.gather, li, g));
                    layer.filters.push_back(group.filters);
                    new_map.insert(new_map.end(), group.filters.begin(), group.filters.end());
                }
                if (conv->has_bias) {
                    throw StructureError("layer " + std::to_string(li) +
                                         ": grouped conv with bias is not supported");
                }
                model.layers.emplace_back(std::move(layer));
                channel_map = std::move(new_map);
            } else {
                const auto dense = dense_entry(structure, li);
                std::vector<std::int64_t> kept;
                if (dense) {
                    kept = (*dense)->kept_filters;
                } else {
                    kept.resize(static_cast<std::size_t>(conv->out_channels));
                    for (std::int64_t k = 0; k < conv->out_channels; ++k) {
                        kept[static_cast<std::size_t>(k)] = k;
                    }
                }
                CompiledConv layer;
                layer.stride = conv->stride;
                layer.padding = conv->padding;
                layer.weight = slice_conv_weight(st.weight, kept, channel_map);
                if (conv->has_bias) layer.bias = gather_vector(st.bias, kept);
                layer.filters = kept;
                model.layers.emplace_back(std::move(layer));
                channel_map = kept;
            }
        } else if (std::get_if<BatchNormLayerSpec>(&net.spec.layers[li])) {
            CompiledBatchNorm layer;
            layer.gamma = gather_vector(st.gamma, channel_map);
            layer.beta = gather_vector(st.beta, channel_map);
            layer.running_mean = gather_values(st.running_mean, channel_map);
            layer.running_var = gather_values(st.running_var, channel_map);
            model.layers.emplace_back(std::move(layer));
        } else if (std::get_if<ReluLayerSpec>(&net.spec.layers[li])) {
            model.layers.emplace_back(CompiledRelu{});
        } else if (const auto* pool = std::get_if<MaxPoolLayerSpec>(&net.spec.layers[li])) {
            model.layers.emplace_back(CompiledMaxPool{pool->kernel, pool->stride});
        } else if (std::get_if<FlattenLayerSpec>(&net.spec.layers[li])) {
            model.layers.emplace_back(CompiledFlatten{});
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&net.spec.layers[li])) {
            // Gather the classifier columns that surviving channels feed; the
            // spatial extent comes from the unpruned shape walk.
            const Shape& in_shape = shapes[li]; // before flatten this is [F]; need pre-flatten
            CompiledLinear layer;
            if (li > 0 && std::get_if<FlattenLayerSpec>(&net.spec.layers[li - 1])) {
                const Shape& spatial = shapes[li - 1]; // [C,H,W] feeding the flatten
                const std::int64_t area = spatial[1] * spatial[2];
                std::vector<std::int64_t> columns;
                columns.reserve(channel_map.size() * static_cast<std::size_t>(area));
                for (const auto c : channel_map) {
                    for (std::int64_t a = 0; a < area; ++a) columns.push_back(c * area + a);
                }
                const std::int64_t out_features = lin->out_features;
                std::vector<double> w(static_cast<std::size_t>(out_features) * columns.size());
                const double* src = st.weight.data().data();
                for (std::int64_t o = 0; o < out_features; ++o) {
                    for (std::size_t j = 0; j < columns.size(); ++j) {
                        w[static_cast<std::size_t>(o) * columns.size() + j] =
                            src[o * lin->in_features + columns[j]];
                    }
                }
                layer.weight = Tensor::from_data(
                    {out_features, static_cast<std::int64_t>(columns.size())}, std::move(w), true);
            } else {
                (void)in_shape;
                layer.weight = Tensor::from_data(st.weight.shape(), st.weight.data(), true);
            }
            if (lin->has_bias) {
                layer.bias = Tensor::from_data(st.bias.shape(), st.bias.data(), true);
            }
            model.layers.emplace_back(std::move(layer));
        }
    }

    const auto counts = count_pruned_params_flops(model);
    model.meta.params = counts.params;
    model.meta.flops = counts.flops;
    return model;
}

Tensor CompiledModel::forward(const Tensor& batch, BatchNormMode mode) {
    if (batch.rank() != 4 ||
        Shape(batch.shape().begin() + 1, batch.shape().end()) != input_shape) {
        throw ShapeError("forward: batch " + shape_to_string(batch.shape()) +
                         " does not match input shape " + shape_to_string(input_shape));
    }
    Tensor x = batch;
    for (auto& layer : layers) {
        if (auto* conv = std::get_if<CompiledConv>(&layer)) {
            x = conv2d(x, conv->weight, conv->bias, conv->stride, conv->padding);
        } else if (auto* g = std::get_if<CompiledGroupedConv>(&layer)) {
            x = grouped_conv2d(x, g->weights, g->gather, g->stride, g->padding);
        } else if (auto* bn = std::get_if<CompiledBatchNorm>(&layer)) {
            x = batchnorm2d(x, bn->gamma, bn->beta, bn->running_mean, bn->running_var, mode);
        } else if (std::get_if<CompiledRelu>(&layer)) {
            x = relu(x);
        } else if (auto* pool = std::get_if<CompiledMaxPool>(&layer)) {
            x = maxpool2d(x, pool->kernel, pool->stride);
        } else if (std::get_if<CompiledFlatten>(&layer)) {
            x = flatten(x);
        } else if (auto* lin = std::get_if<CompiledLinear>(&layer)) {
            x = linear(x, lin->weight, lin->bias);
        }
    }
    return x;
}

std::vector<Tensor*> CompiledModel::parameter_slots() {
    std::vector<Tensor*> out;
    for (auto& layer : layers) {
        if (auto* conv = std::get_if<CompiledConv>(&layer)) {
            out.push_back(&conv->weight);
            if (conv->bias.defined()) out.push_back(&conv->bias);
        } else if (auto* g = std::get_if<CompiledGroupedConv>(&layer)) {
            for (auto& w : g->weights) out.push_back(&w);
        } else if (auto* bn = std::get_if<CompiledBatchNorm>(&layer)) {
            out.push_back(&bn->gamma);
            out.push_back(&bn->beta);
        } else if (auto* lin = std::get_if<CompiledLinear>(&layer)) {
            out.push_back(&lin->weight);
            if (lin->bias.defined()) out.push_back(&lin->bias);
        }
    }
    return out;
}

std::vector<Tensor> CompiledModel::parameters() {
    std::vector<Tensor> out;
    for (Tensor* slot : parameter_slots()) out.push_back(*slot);
    return out;
}

void CompiledModel::zero_grad() {
    for (Tensor* slot : parameter_slots()) slot->zero_grad();
}

CompiledModel CompiledModel::clone() const {
    CompiledModel copy;
    copy.input_shape = input_shape;
    copy.class_count = class_count;
    copy.meta = meta;
    auto dup = [](const Tensor& t) {
        return t.defined() ? Tensor::from_data(t.shape(), t.data(), t.requires_grad()) : Tensor{};
    };
    for (const auto& layer : layers) {
        if (const auto* conv = std::get_if<CompiledConv>(&layer)) {
            CompiledConv c = *conv;
            c.weight = dup(conv->weight);
            c.bias = dup(conv->bias);
            copy.layers.emplace_back(std::move(c));
        } else if (const auto* g = std::get_if<CompiledGroupedConv>(&layer)) {
            CompiledGroupedConv c = *g;
            for (std::size_t i = 0; i < c.weights.size(); ++i) c.weights[i] = dup(g->weights[i]);
            copy.layers.emplace_back(std::move(c));
        } else if (const auto* bn = std::get_if<CompiledBatchNorm>(&layer)) {
            CompiledBatchNorm c = *bn;
            c.gamma = dup(bn->gamma);
            c.beta = dup(bn->beta);
            copy.layers.emplace_back(std::move(c));
        } else {
            copy.layers.push_back(layer);
        }
    }
    return copy;
}

double CompiledModel::evaluate_accuracy(const std::vector<std::vector<double>>& images,
                                        const std::vector<std::int64_t>& labels,
                                        std::int64_t batch_size) {
    NoGradGuard guard;
    const std::int64_t total = static_cast<std::int64_t>(images.size());
    const std::int64_t sample = shape_numel(input_shape);
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < total; start += batch_size) {
        const std::int64_t b = std::min(batch_size, total - start);
        std::vector<double> buf(static_cast<std::size_t>(b * sample));
        for (std::int64_t i = 0; i < b; ++i) {
            std::copy(images[start + i].begin(), images[start + i].end(), buf.begin() + i * sample);
        }
        Shape bshape{b};
        bshape.insert(bshape.end(), input_shape.begin(), input_shape.end());
        Tensor logits = forward(Tensor::from_data(bshape, std::move(buf)), BatchNormMode::Eval);
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

Network apply_structure_mask(const Network& net, const PrunedStructure& structure) {
    Network masked = net.clone();

    auto silence_channels = [&](std::size_t conv_index, const std::vector<bool>& dead) {
        // zero the dead filters and their batchnorm slice downstream
        Tensor& w = masked.state[conv_index].weight;
        const std::int64_t per_filter = w.numel() / w.dim(0);
        for (std::int64_t k = 0; k < w.dim(0); ++k) {
            if (!dead[static_cast<std::size_t>(k)]) continue;
            std::fill(w.data().begin() + k * per_filter, w.data().begin() + (k + 1) * per_filter,
                      0.0);
            if (masked.state[conv_index].bias.defined()) {
                masked.state[conv_index].bias.data()[static_cast<std::size_t>(k)] = 0.0;
            }
        }
        for (std::size_t j = conv_index + 1; j < masked.spec.layers.size(); ++j) {
            if (std::get_if<ReluLayerSpec>(&masked.spec.layers[j]) ||
                std::get_if<MaxPoolLayerSpec>(&masked.spec.layers[j])) {
                continue;
            }
            if (std::get_if<BatchNormLayerSpec>(&masked.spec.layers[j])) {
                for (std::size_t k = 0; k < dead.size(); ++k) {
                    if (dead[k]) {
                        masked.state[j].gamma.data()[k] = 0.0;
                        masked.state[j].beta.data()[k] = 0.0;
                    }
                }
            }
            break;
        }
    };

    for (const auto& layer : structure.grouped) {
        const auto& conv = std::get<ConvLayerSpec>(masked.spec.layers[layer.layer_index]);
        Tensor& w = masked.state[layer.layer_index].weight;
        std::vector<double> scattered(w.numel(), 0.0);
        const std::int64_t cin = conv.in_channels, kernel = conv.kernel_h * conv.kernel_w;
        const double* src = net.state[layer.layer_index].weight.data().data();
        std::vector<bool> dead(static_cast<std::size_t>(conv.out_channels), true);
        for (const auto& group : layer.groups) {
            for (const auto k : group.filters) {
                dead[static_cast<std::size_t>(k)] = false;
                for (const auto m : group.gather) {
                    std::memcpy(scattered.data() + (k * cin + m) * kernel,
                                src + (k * cin + m) * kernel,
                                static_cast<std::size_t>(kernel) * sizeof(double));
                }
            }
        }
        w.data() = std::move(scattered);
        silence_channels(layer.layer_index, dead);
    }

    for (const auto& layer : structure.dense) {
        const auto& conv = std::get<ConvLayerSpec>(masked.spec.layers[layer.layer_index]);
        std::vector<bool> dead(static_cast<std::size_t>(conv.out_channels), true);
        for (const auto k : layer.kept_filters) dead[static_cast<std::size_t>(k)] = false;
        silence_channels(layer.layer_index, dead);
    }
    return masked;
}

PrunedCountReport count_pruned_params_flops(const CompiledModel& model) {
    PrunedCountReport report;
    report.dense_params = model.meta.dense_params;
    report.dense_flops = model.meta.dense_flops;

    Shape cur = model.input_shape;
    for (const auto& layer : model.layers) {
        if (const auto* conv = std::get_if<CompiledConv>(&layer)) {
            const std::int64_t oh = (cur[1] + 2 * conv->padding - conv->weight.dim(2)) / conv->stride + 1;
            const std::int64_t ow = (cur[2] + 2 * conv->padding - conv->weight.dim(3)) / conv->stride + 1;
            report.params += conv->weight.numel() + (conv->bias.defined() ? conv->bias.numel() : 0);
            report.macs += conv->weight.numel() * oh * ow;
            cur = {conv->weight.dim(0), oh, ow};
        } else if (const auto* g = std::get_if<CompiledGroupedConv>(&layer)) {
            const std::int64_t kh = g->weights[0].dim(2), kw = g->weights[0].dim(3);
            const std::int64_t oh = (cur[1] + 2 * g->padding - kh) / g->stride + 1;
            const std::int64_t ow = (cur[2] + 2 * g->padding - kw) / g->stride + 1;
            std::int64_t cout = 0;
            for (const auto& w : g->weights) {
                report.params += w.numel();
                report.macs += w.numel() * oh * ow;
                cout += w.dim(0);
            }
            cur = {cout, oh, ow};
        } else if (const auto* pool = std::get_if<CompiledMaxPool>(&layer)) {
            cur = {cur[0], (cur[1] - pool->kernel) / pool->stride + 1,
                   (cur[2] - pool->kernel) / pool->stride + 1};
        } else if (std::get_if<CompiledFlatten>(&layer)) {
            cur = {shape_numel(cur)};
        } else if (const auto* lin = std::get_if<CompiledLinear>(&layer)) {
            report.params += lin->weight.numel() + (lin->bias.defined() ? lin->bias.numel() : 0);
            report.macs += lin->weight.numel();
            cur = {lin->weight.dim(0)};
        }
    }
    report.flops = 2 * report.macs;
    if (report.dense_params > 0) {
        report.param_reduction_pct =
            100.0 * (1.0 - static_cast<double>(report.params) / static_cast<double>(report.dense_params));
    }
    if (report.dense_flops > 0) {
        report.flops_reduction_pct =
            100.0 * (1.0 - static_cast<double>(report.flops) / static_cast<double>(report.dense_flops));
    }
    return report;
}

} // namespace dsp
