#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "dsp/grouping.hpp"
#include "dsp/model.hpp"
#include "dsp/pruning.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

struct CompiledConv {
    std::int64_t stride = 1, padding = 0;
    Tensor weight;
    Tensor bias;
    std::vector<std::int64_t> filters; // original filter ids, output order
};

struct CompiledGroupedConv {
    std::int64_t stride = 1, padding = 0;
    std::vector<Tensor> weights;                    // per group
    std::vector<std::vector<std::int64_t>> gather;  // runtime channel positions
    std::vector<std::vector<std::int64_t>> filters; // original filter ids per group
};

struct CompiledBatchNorm {
    Tensor gamma;
    Tensor beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

struct CompiledRelu {};

struct CompiledMaxPool {
    std::int64_t kernel = 2, stride = 2;
};

struct CompiledFlatten {};

struct CompiledLinear {
    Tensor weight;
    Tensor bias;
};

using CompiledLayer = std::variant<CompiledConv, CompiledGroupedConv, CompiledBatchNorm,
                                   CompiledRelu, CompiledMaxPool, CompiledFlatten, CompiledLinear>;

struct ModelMeta {
    double beta = 0.0;
    double lambda = 0.0;
    std::int64_t groups = 0;
    std::uint64_t seed = 0;
    std::int64_t params = 0;
    std::int64_t flops = 0;
    std::int64_t dense_params = 0;
    std::int64_t dense_flops = 0;
    std::map<std::string, std::string> extra;
};

// Executable grouped-convolution network. Immutable after construction for
// inference; fine-tuning mutates parameter values through parameter_slots().
struct CompiledModel {
    Shape input_shape;
    std::int64_t class_count = 0;
    std::vector<CompiledLayer> layers;
    ModelMeta meta;

    Tensor forward(const Tensor& batch, BatchNormMode mode);
    std::vector<Tensor*> parameter_slots();
    std::vector<Tensor> parameters();
    void zero_grad();
    CompiledModel clone() const;

    double evaluate_accuracy(const std::vector<std::vector<double>>& images,
                             const std::vector<std::int64_t>& labels,
                             std::int64_t batch_size = 256);
};

// Lowers a pruned structure over the dense network into grouped-convolution
// form; empty groups are already elided by the pruning step, dead upstream
// filters are removed here together with their batchnorm slices and the
// classifier columns they fed.
CompiledModel compile(const Network& net, const PrunedStructure& structure);

// Dense-shaped reference with the same function as the compiled model: pruned
// weight slices zeroed and eliminated channels silenced through their
// batchnorm parameters. Used by the equivalence oracle.
Network apply_structure_mask(const Network& net, const PrunedStructure& structure);

struct PrunedCountReport {
    std::int64_t params = 0;
    std::int64_t flops = 0;
    std::int64_t macs = 0;
    std::int64_t dense_params = 0;
    std::int64_t dense_flops = 0;
    double param_reduction_pct = 0.0; // vs dense, two decimals when printed
    double flops_reduction_pct = 0.0;
};

PrunedCountReport count_pruned_params_flops(const CompiledModel& model);

// Checkpoint container: either a dense network (optionally with learned group
// logits) or a compiled model.
struct Checkpoint {
    bool compiled = false;
    Network dense;                       // valid when !compiled
    std::vector<GroupParameters> logits; // optional, dense checkpoints only
    CompiledModel model;                 // valid when compiled
    std::map<std::string, std::string> metadata;
};

std::string serialize_dense(const Network& net, const std::vector<GroupParameters>& logits,
                            const std::map<std::string, std::string>& metadata);
std::string serialize_compiled(const CompiledModel& model);
Checkpoint deserialize_checkpoint(const std::string& bytes);

// File round trip; writes go to a temp file first and are renamed into place.
void save_checkpoint_file(const std::string& path, const std::string& bytes);
std::string read_binary_file(const std::string& path);

} // namespace dsp
