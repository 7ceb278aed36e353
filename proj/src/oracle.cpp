#include "dsp/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dsp/errors.hpp"
#include "dsp/pruning.hpp"

namespace dsp {

namespace {

// Restricted growth strings: label[i] <= max(label[0..i-1]) + 1, capped by the
// group budget. Lexicographic order, filter 0 always in group 0.
void grow_partitions(std::size_t pos, std::int64_t used, std::int64_t filters, std::int64_t groups,
                     std::vector<std::int64_t>& label,
                     std::vector<std::vector<std::int64_t>>& out) {
    if (pos == static_cast<std::size_t>(filters)) {
        out.push_back(label);
        return;
    }
    const std::int64_t cap = std::min(groups - 1, used);
    for (std::int64_t g = 0; g <= cap; ++g) {
        label[pos] = g;
        grow_partitions(pos + 1, std::max(used, g + 1), filters, groups, label, out);
    }
}

} // namespace

std::vector<std::vector<std::int64_t>> enumerate_partitions(std::int64_t filters,
                                                            std::int64_t groups) {
    if (groups < 1) throw ConfigError("enumerate_partitions: groups must be >= 1");
    if (filters < 1) throw ConfigError("enumerate_partitions: filters must be >= 1");
    if (filters > 12) {
        throw CapacityError("enumerate_partitions: " + std::to_string(filters) +
                            " filters exceeds the brute-force cap of 12");
    }
    std::vector<std::vector<std::int64_t>> out;
    std::vector<std::int64_t> label(static_cast<std::size_t>(filters), 0);
    grow_partitions(1, 1, filters, groups, label, out);
    return out;
}

double evaluate_partition(const Network& net, std::size_t layer,
                          const std::vector<std::int64_t>& assignment, double rate,
                          const Split& eval_split, const Shape& sample_shape) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("pruning rate must lie in [0, 1), got " + std::to_string(rate));
    }
    const auto* conv = std::get_if<ConvLayerSpec>(&net.spec.layers[layer]);
    if (!conv) throw StructureError("evaluate_partition: layer " + std::to_string(layer) + " is not conv");
    const std::int64_t groups = assignment.empty()
                                    ? 1
                                    : 1 + *std::max_element(assignment.begin(), assignment.end());
    const auto ga = make_assignment(layer, groups, assignment);
    const auto importance = compute_importance(net.state[layer].weight, ga);

    Network masked = net.clone();
    Tensor& w = masked.state[layer].weight;
    const std::int64_t cin = conv->in_channels;
    const std::int64_t kernel = conv->kernel_h * conv->kernel_w;
    const std::int64_t to_prune = static_cast<std::int64_t>(std::llround(rate * static_cast<double>(cin)));
    for (std::int64_t g = 0; g < groups; ++g) {
        if (importance.group_sizes[static_cast<std::size_t>(g)] == 0) continue;
        std::vector<std::int64_t> order(static_cast<std::size_t>(cin));
        std::iota(order.begin(), order.end(), 0);
        const auto& scores = importance.scores[static_cast<std::size_t>(g)];
        std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
        });
        for (std::int64_t i = 0; i < to_prune; ++i) {
            const std::int64_t m = order[static_cast<std::size_t>(i)];
            for (std::int64_t k = 0; k < conv->out_channels; ++k) {
                if (assignment[static_cast<std::size_t>(k)] != g) continue;
                std::fill(w.data().begin() + (k * cin + m) * kernel,
                          w.data().begin() + (k * cin + m) * kernel + kernel, 0.0);
            }
        }
    }
    return evaluate_accuracy(masked, eval_split.images, eval_split.labels, sample_shape);
}

BruteForceResult brute_force_study(const Network& net, std::size_t layer, std::int64_t groups,
                                   const std::vector<double>& rates, const Split& eval_split,
                                   const Shape& sample_shape) {
    const auto* conv = std::get_if<ConvLayerSpec>(&net.spec.layers[layer]);
    if (!conv) throw StructureError("brute_force_study: layer " + std::to_string(layer) + " is not conv");
    const auto partitions = enumerate_partitions(conv->out_channels, groups);

    BruteForceResult result;
    for (const double rate : rates) {
        BruteForceSummary summary;
        summary.rate = rate;
        summary.best = -1.0;
        summary.worst = 200.0;
        double sum = 0.0;
        for (const auto& partition : partitions) {
            const double acc = evaluate_partition(net, layer, partition, rate, eval_split,
                                                  sample_shape);
            result.rows.push_back(PartitionEval{partition, rate, acc});
            sum += acc;
            if (acc > summary.best) {
                summary.best = acc;
                summary.best_assignment = partition;
            }
            if (acc < summary.worst) {
                summary.worst = acc;
                summary.worst_assignment = partition;
            }
        }
        summary.mean = sum / static_cast<double>(partitions.size());
        result.summary.push_back(std::move(summary));
    }
    return result;
}

std::string partition_to_string(const std::vector<std::int64_t>& assignment) {
    const std::int64_t groups = assignment.empty()
                                    ? 0
                                    : 1 + *std::max_element(assignment.begin(), assignment.end());
    std::ostringstream os;
    for (std::int64_t g = 0; g < groups; ++g) {
        os << '[';
        bool first = true;
        for (std::size_t k = 0; k < assignment.size(); ++k) {
            if (assignment[k] != g) continue;
            if (!first) os << ' ';
            os << k;
            first = false;
        }
        os << ']';
    }
    return os.str();
}

std::string brute_force_csv(const BruteForceResult& result) {
    std::ostringstream os;
    os << "partition,rate,accuracy\n";
    char buf[64];
    for (const auto& row : result.rows) {
        std::snprintf(buf, sizeof(buf), "%.4g,%.4f", row.rate, row.accuracy);
        os << '"' << partition_to_string(row.assignment) << "\"," << buf << '\n';
    }
    for (const auto& s : result.summary) {
        std::snprintf(buf, sizeof(buf), "%.4g", s.rate);
        os << "\"best " << partition_to_string(s.best_assignment) << "\"," << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.4f", s.best);
        os << buf << '\n';
        std::snprintf(buf, sizeof(buf), "%.4g", s.rate);
        os << "\"worst " << partition_to_string(s.worst_assignment) << "\"," << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.4f", s.worst);
        os << buf << '\n';
        std::snprintf(buf, sizeof(buf), "%.4g", s.rate);
        os << "\"average\"," << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.4f", s.mean);
        os << buf << '\n';
    }
    return os.str();
}

std::vector<std::int64_t> channel_rank_ascending(const Tensor& weight) {
    if (weight.rank() != 4) {
        throw ShapeError("channel_rank_ascending expects a conv weight, got " +
                         shape_to_string(weight.shape()));
    }
    const std::int64_t cout = weight.dim(0), cin = weight.dim(1),
                       kernel = weight.dim(2) * weight.dim(3);
    std::vector<double> energy(static_cast<std::size_t>(cin), 0.0);
    const double* w = weight.data().data();
    for (std::int64_t k = 0; k < cout; ++k) {
        for (std::int64_t m = 0; m < cin; ++m) {
            const double* kern = w + (k * cin + m) * kernel;
            double s = 0.0;
            for (std::int64_t i = 0; i < kernel; ++i) s += kern[i] * kern[i];
            energy[static_cast<std::size_t>(m)] += s;
        }
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(cin));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return energy[static_cast<std::size_t>(a)] < energy[static_cast<std::size_t>(b)];
    });
    return order;
}

std::vector<std::int64_t> channel_prune_baseline(const Tensor& weight, double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) {
        throw ConfigError("beta must lie in [0, 1), got " + std::to_string(beta));
    }
    const std::int64_t cout = weight.dim(0), cin = weight.dim(1),
                       kernel = weight.dim(2) * weight.dim(3);
    std::vector<double> energy(static_cast<std::size_t>(cin), 0.0);
    const double* w = weight.data().data();
    for (std::int64_t k = 0; k < cout; ++k) {
        for (std::int64_t m = 0; m < cin; ++m) {
            const double* kern = w + (k * cin + m) * kernel;
            double s = 0.0;
            for (std::int64_t i = 0; i < kernel; ++i) s += kern[i] * kern[i];
            energy[static_cast<std::size_t>(m)] += s;
        }
    }
    double total = 0.0;
    for (const double e : energy) total += e;
    const auto order = channel_rank_ascending(weight);
    std::vector<std::int64_t> pruned;
    if (total <= 0.0) {
        if (beta > 0.0) pruned = order;
    } else {
        double cum = 0.0;
        for (const auto m : order) {
            if ((cum + energy[static_cast<std::size_t>(m)]) / total < beta) {
                pruned.push_back(m);
                cum += energy[static_cast<std::size_t>(m)];
            } else {
                break;
            }
        }
    }
    std::sort(pruned.begin(), pruned.end());
    return pruned;
}

std::vector<std::int64_t> channel_prune_baseline_rate(const Tensor& weight, double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("pruning rate must lie in [0, 1), got " + std::to_string(rate));
    }
    const auto order = channel_rank_ascending(weight);
    const auto count = static_cast<std::size_t>(
        std::llround(rate * static_cast<double>(weight.dim(1))));
    std::vector<std::int64_t> pruned(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(pruned.begin(), pruned.end());
    return pruned;
}

} // namespace dsp
