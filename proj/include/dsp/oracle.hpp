#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsp/data.hpp"
#include "dsp/model.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

// All distinct partitions of `filters` items into at most `groups` unlabeled
// groups, enumerated as restricted growth strings: item 0 is always in group
// 0 and each new group takes the next unused id, which deduplicates label
// permutations. Guarded at 12 filters.
std::vector<std::vector<std::int64_t>> enumerate_partitions(std::int64_t filters,
                                                            std::int64_t groups);

// Validation accuracy of the network with the given partition applied to
// `layer` at a fixed pruning rate: in every group the rate-fraction of
// lowest-importance group channels is zeroed, no fine-tuning.
double evaluate_partition(const Network& net, std::size_t layer,
                          const std::vector<std::int64_t>& assignment, double rate,
                          const Split& eval_split, const Shape& sample_shape);

struct PartitionEval {
    std::vector<std::int64_t> assignment;
    double rate = 0.0;
    double accuracy = 0.0;
};

struct BruteForceSummary {
    double rate = 0.0;
    double best = 0.0;
    double worst = 0.0;
    double mean = 0.0;
    std::vector<std::int64_t> best_assignment;
    std::vector<std::int64_t> worst_assignment;
};

struct BruteForceResult {
    std::vector<PartitionEval> rows; // canonical partition order, rate-major within
    std::vector<BruteForceSummary> summary;
};

BruteForceResult brute_force_study(const Network& net, std::size_t layer, std::int64_t groups,
                                   const std::vector<double>& rates, const Split& eval_split,
                                   const Shape& sample_shape);

std::string partition_to_string(const std::vector<std::int64_t>& assignment);
std::string brute_force_csv(const BruteForceResult& result);

// Classic input-channel pruning reference, implemented independently of the
// grouped path: channels ranked by ascending squared norm summed over all
// filters, pruned greedily under the same energy-ratio bound.
std::vector<std::int64_t> channel_rank_ascending(const Tensor& weight);
std::vector<std::int64_t> channel_prune_baseline(const Tensor& weight, double beta);
// Fixed-rate variant used by the brute-force study.
std::vector<std::int64_t> channel_prune_baseline_rate(const Tensor& weight, double rate);

} // namespace dsp
