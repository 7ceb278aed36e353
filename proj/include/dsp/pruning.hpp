#pragma once

#include <cstdint>
#include <vector>

#include "dsp/grouping.hpp"
#include "dsp/model.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

// Discrete partition of a layer's filters into groups (0-based group ids).
// Every filter belongs to exactly one group; groups may be empty.
struct GroupAssignment {
    std::size_t layer_index = 0;
    std::int64_t group_count = 1;
    std::vector<std::int64_t> group_of_filter;

    void validate() const; // StructureError when not a partition
    std::vector<std::vector<std::int64_t>> filters_per_group() const;
};

// Filter k goes to argmax_p logits[k, p]; ties break toward the lower group.
GroupAssignment discretize_alpha(const GroupParameters& params);

// Convenience: assignment from an explicit label vector.
GroupAssignment make_assignment(std::size_t layer_index, std::int64_t group_count,
                                std::vector<std::int64_t> labels);

// scores[p][m] = sum over filters k in group p of ||W_{k,m}||_F^2.
struct ImportanceScores {
    std::vector<std::vector<double>> scores; // [groups][in_channels]
    std::vector<std::int64_t> group_sizes;   // filters per group
};

ImportanceScores compute_importance(const Tensor& weight, const GroupAssignment& assignment);

// Greedy realization of the energy-ratio criterion: channels are taken in
// ascending importance while ||Q||^2 / ||G||^2 < beta stays true after each
// addition. Returns per-group pruned channel ids (ascending). Empty groups
// prune nothing; groups with zero total energy are fully pruned when beta > 0.
std::vector<std::vector<std::int64_t>> find_redundant_channels(const ImportanceScores& scores,
                                                               double beta);

// Same criterion over output filters of one weight tensor; returns the kept
// filter ids (ascending).
std::vector<std::int64_t> prune_filters(const Tensor& weight, double beta);

struct PrunedGroup {
    std::vector<std::int64_t> filters; // ascending original filter ids
    std::vector<std::int64_t> gather;  // ascending original input-channel ids kept
    double pruned_ratio = 0.0;         // achieved ||Q||^2 / ||G||^2
};

struct GroupedLayerPruning {
    std::size_t layer_index = 0;
    std::int64_t dense_filters = 0;  // layer width before pruning
    std::int64_t dense_channels = 0; // input channels before pruning
    std::vector<PrunedGroup> groups; // surviving groups, original group order
};

struct DenseLayerPruning {
    std::size_t layer_index = 0;
    std::vector<std::int64_t> kept_filters; // ascending
};

struct PrunedStructure {
    double beta = 0.0;
    std::int64_t group_count = 0;
    std::vector<GroupedLayerPruning> grouped;
    std::vector<DenseLayerPruning> dense; // upstream dead-filter eliminations
};

// Phase 2: applies the criterion to every grouped layer of the network and
// works out cross-layer bookkeeping (input channels dropped by every group
// eliminate the producing filters upstream; groups whose channels are all
// pruned are dropped along with their filters).
PrunedStructure prune(const Network& net, const std::vector<GroupAssignment>& assignments,
                      double beta);

// Human-readable per-layer report (groups, kept filters, gather lists, ratios).
std::string structure_report(const PrunedStructure& structure);

// Machine-readable JSON round trip, consumed by the compile module.
std::string structure_to_json(const PrunedStructure& structure);
PrunedStructure structure_from_json(const std::string& text);

} // namespace dsp
