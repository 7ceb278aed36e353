#include "dsp/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "dsp/errors.hpp"

#include <json.hpp>

namespace dsp {

void GroupAssignment::validate() const {
    if (group_count < 1) throw StructureError("assignment needs at least one group");
    for (std::size_t k = 0; k < group_of_filter.size(); ++k) {
        const auto g = group_of_filter[k];
        if (g < 0 || g >= group_count) {
            throw StructureError("filter " + std::to_string(k) + " assigned to group " +
                                 std::to_string(g) + " outside [0, " + std::to_string(group_count) +
                                 ")");
        }
    }
}

std::vector<std::vector<std::int64_t>> GroupAssignment::filters_per_group() const {
    validate();
    std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(group_count));
    for (std::size_t k = 0; k < group_of_filter.size(); ++k) {
        out[static_cast<std::size_t>(group_of_filter[k])].push_back(static_cast<std::int64_t>(k));
    }
    return out;
}

GroupAssignment discretize_alpha(const GroupParameters& params) {
    const std::int64_t filters = params.logits.dim(0), groups = params.logits.dim(1);
    const double* pv = params.logits.data().data();
    for (std::size_t i = 0; i < params.logits.data().size(); ++i) {
        if (!std::isfinite(pv[i])) throw DomainError("group logits must be finite");
    }
    GroupAssignment out;
    out.layer_index = params.layer_index;
    out.group_count = groups;
    out.group_of_filter.resize(static_cast<std::size_t>(filters));
    for (std::int64_t k = 0; k < filters; ++k) {
        std::int64_t best = 0;
        for (std::int64_t p = 1; p < groups; ++p) {
            if (pv[k * groups + p] > pv[k * groups + best]) best = p; // ties keep the lower id
        }
        out.group_of_filter[static_cast<std::size_t>(k)] = best;
    }
    return out;
}

GroupAssignment make_assignment(std::size_t layer_index, std::int64_t group_count,
                                std::vector<std::int64_t> labels) {
    GroupAssignment out;
    out.layer_index = layer_index;
    out.group_count = group_count;
    out.group_of_filter = std::move(labels);
    out.validate();
    return out;
}

ImportanceScores compute_importance(const Tensor& weight, const GroupAssignment& assignment) {
    if (weight.rank() != 4) {
        throw ShapeError("compute_importance expects a conv weight, got " +
                         shape_to_string(weight.shape()));
    }
    if (weight.dim(0) != static_cast<std::int64_t>(assignment.group_of_filter.size())) {
        throw StructureError("assignment covers " + std::to_string(assignment.group_of_filter.size()) +
                             " filters but weight has " + std::to_string(weight.dim(0)));
    }
    assignment.validate();
    const std::int64_t cout = weight.dim(0), cin = weight.dim(1),
                       kernel = weight.dim(2) * weight.dim(3);
    ImportanceScores out;
    out.scores.assign(static_cast<std::size_t>(assignment.group_count),
                      std::vector<double>(static_cast<std::size_t>(cin), 0.0));
    out.group_sizes.assign(static_cast<std::size_t>(assignment.group_count), 0);
    const double* w = weight.data().data();
    for (std::int64_t k = 0; k < cout; ++k) {
        const auto g = static_cast<std::size_t>(assignment.group_of_filter[static_cast<std::size_t>(k)]);
        ++out.group_sizes[g];
        for (std::int64_t m = 0; m < cin; ++m) {
            const double* kern = w + (k * cin + m) * kernel;
            double s = 0.0;
            for (std::int64_t i = 0; i < kernel; ++i) s += kern[i] * kern[i];
            out.scores[g][static_cast<std::size_t>(m)] += s;
        }
    }
    return out;
}

namespace {

void check_beta(double beta) {
    if (!(beta >= 0.0 && beta < 1.0)) {
        throw ConfigError("beta must lie in [0, 1), got " + std::to_string(beta));
    }
}

// Greedy ascending-energy prefix under the ratio bound. For a ratio of sums
// with non-negative terms this maximizes the pruned count, which the
// exhaustive oracle in the tests confirms on small groups.
std::vector<std::int64_t> greedy_prune(const std::vector<double>& energy, double beta) {
    const std::size_t n = energy.size();
    std::vector<std::int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t a, std::int64_t b) { return energy[a] < energy[b]; });
    double total = 0.0;
    for (const double e : energy) total += e;
    std::vector<std::int64_t> pruned;
    if (total <= 0.0) {
        if (beta > 0.0) pruned.assign(order.begin(), order.end());
    } else {
        double cum = 0.0;
        for (const std::int64_t idx : order) {
            if ((cum + energy[idx]) / total < beta) {
                pruned.push_back(idx);
                cum += energy[idx];
            } else {
                break;
            }
        }
    }
    std::sort(pruned.begin(), pruned.end());
    return pruned;
}

} // namespace

std::vector<std::vector<std::int64_t>> find_redundant_channels(const ImportanceScores& scores,
                                                               double beta) {
    check_beta(beta);
    std::vector<std::vector<std::int64_t>> out;
    out.reserve(scores.scores.size());
    for (std::size_t g = 0; g < scores.scores.size(); ++g) {
        if (scores.group_sizes[g] == 0) {
            out.emplace_back(); // empty groups prune nothing
            continue;
        }
        out.push_back(greedy_prune(scores.scores[g], beta));
    }
    return out;
}

std::vector<std::int64_t> prune_filters(const Tensor& weight, double beta) {
    check_beta(beta);
    if (weight.rank() != 4) {
        throw ShapeError("prune_filters expects a conv weight, got " +
                         shape_to_string(weight.shape()));
    }
    const std::int64_t cout = weight.dim(0);
    const std::int64_t per_filter = weight.numel() / cout;
    std::vector<double> energy(static_cast<std::size_t>(cout), 0.0);
    const double* w = weight.data().data();
    for (std::int64_t k = 0; k < cout; ++k) {
        double s = 0.0;
        for (std::int64_t i = 0; i < per_filter; ++i) {
            s += w[k * per_filter + i] * w[k * per_filter + i];
        }
        energy[static_cast<std::size_t>(k)] = s;
    }
    const auto pruned = greedy_prune(energy, beta);
    std::vector<std::int64_t> kept;
    std::size_t pi = 0;
    for (std::int64_t k = 0; k < cout; ++k) {
        if (pi < pruned.size() && pruned[pi] == k) {
            ++pi;
        } else {
            kept.push_back(k);
        }
    }
    return kept;
}

namespace {

// Nearest conv producer of layer li's input, walking through channel-
// preserving layers only.
std::optional<std::size_t> producing_conv(const NetworkSpec& spec, std::size_t li) {
    for (std::size_t j = li; j-- > 0;) {
        const auto& layer = spec.layers[j];
        if (std::get_if<ConvLayerSpec>(&layer)) return j;
        if (std::get_if<BatchNormLayerSpec>(&layer) || std::get_if<ReluLayerSpec>(&layer) ||
            std::get_if<MaxPoolLayerSpec>(&layer)) {
            continue;
        }
        break; // flatten/linear: no channel notion upstream
    }
    return std::nullopt;
}

} // namespace

PrunedStructure prune(const Network& net, const std::vector<GroupAssignment>& assignments,
                      double beta) {
    check_beta(beta);
    PrunedStructure structure;
    structure.beta = beta;
    for (const auto& assignment : assignments) {
        structure.group_count = std::max(structure.group_count, assignment.group_count);
        const std::size_t li = assignment.layer_index;
        if (li >= net.spec.layers.size() || !std::get_if<ConvLayerSpec>(&net.spec.layers[li])) {
            throw StructureError("assignment targets layer " + std::to_string(li) +
                                 " which is not a conv layer");
        }
        const auto& conv = std::get<ConvLayerSpec>(net.spec.layers[li]);
        const Tensor& weight = net.state[li].weight;
        const auto importance = compute_importance(weight, assignment);
        const auto redundant = find_redundant_channels(importance, beta);
        const auto members = assignment.filters_per_group();

        GroupedLayerPruning layer;
        layer.layer_index = li;
        layer.dense_filters = conv.out_channels;
        layer.dense_channels = conv.in_channels;
        for (std::size_t g = 0; g < members.size(); ++g) {
            if (members[g].empty()) continue; // empty group dropped
            PrunedGroup group;
            group.filters = members[g];
            std::size_t ri = 0;
            double pruned_energy = 0.0, total_energy = 0.0;
            for (std::int64_t m = 0; m < conv.in_channels; ++m) {
                total_energy += importance.scores[g][static_cast<std::size_t>(m)];
                if (ri < redundant[g].size() && redundant[g][ri] == m) {
                    pruned_energy += importance.scores[g][static_cast<std::size_t>(m)];
                    ++ri;
                } else {
                    group.gather.push_back(m);
                }
            }
            group.pruned_ratio = total_energy > 0.0 ? pruned_energy / total_energy : 0.0;
            if (group.gather.empty()) continue; // all channels pruned: group eliminated
            layer.groups.push_back(std::move(group));
        }
        if (layer.groups.empty()) {
            throw StructureError("layer " + std::to_string(li) +
                                 ": pruning left zero output filters");
        }
        structure.grouped.push_back(std::move(layer));
    }

    // Input channels used by no group eliminate the producing filters.
    for (const auto& layer : structure.grouped) {
        const auto& conv = std::get<ConvLayerSpec>(net.spec.layers[layer.layer_index]);
        std::vector<bool> used(static_cast<std::size_t>(conv.in_channels), false);
        for (const auto& group : layer.groups) {
            for (const auto m : group.gather) used[static_cast<std::size_t>(m)] = true;
        }
        std::vector<std::int64_t> kept;
        for (std::int64_t m = 0; m < conv.in_channels; ++m) {
            if (used[static_cast<std::size_t>(m)]) kept.push_back(m);
        }
        if (kept.empty()) {
            throw StructureError("layer " + std::to_string(layer.layer_index) +
                                 ": every input channel pruned");
        }
        if (static_cast<std::int64_t>(kept.size()) == conv.in_channels) continue;
        const auto producer = producing_conv(net.spec, layer.layer_index);
        if (!producer) continue; // network input: unused channels merely skipped
        const auto* pconv = std::get_if<ConvLayerSpec>(&net.spec.layers[*producer]);
        if (pconv->grouped) continue; // grouped producers keep their structure
        structure.dense.push_back(DenseLayerPruning{*producer, kept});
    }
    return structure;
}

std::string structure_report(const PrunedStructure& structure) {
    std::ostringstream os;
    os << "pruned structure (beta " << structure.beta << ", groups " << structure.group_count
       << ")\n";
    auto list = [&](const std::vector<std::int64_t>& v) {
        std::ostringstream s;
        s << '[';
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s << ' ';
            s << v[i];
        }
        s << ']';
        return s.str();
    };
    for (const auto& layer : structure.grouped) {
        os << "layer " << layer.layer_index << ": " << layer.groups.size() << " group(s), "
           << layer.dense_filters << " -> ";
        std::size_t filters = 0;
        for (const auto& g : layer.groups) filters += g.filters.size();
        os << filters << " filters\n";
        for (std::size_t g = 0; g < layer.groups.size(); ++g) {
            const auto& group = layer.groups[g];
            os << "  group " << g << ": filters " << list(group.filters) << " gather "
               << list(group.gather) << " pruned-ratio " << group.pruned_ratio << "\n";
        }
    }
    for (const auto& layer : structure.dense) {
        os << "layer " << layer.layer_index << ": kept filters " << list(layer.kept_filters)
           << " (dead filters eliminated)\n";
    }
    return os.str();
}

std::string structure_to_json(const PrunedStructure& structure) {
    nlohmann::json j;
    j["beta"] = structure.beta;
    j["group_count"] = structure.group_count;
    j["grouped"] = nlohmann::json::array();
    for (const auto& layer : structure.grouped) {
        nlohmann::json jl;
        jl["layer"] = layer.layer_index;
        jl["dense_filters"] = layer.dense_filters;
        jl["dense_channels"] = layer.dense_channels;
        jl["groups"] = nlohmann::json::array();
        for (const auto& g : layer.groups) {
            jl["groups"].push_back({{"filters", g.filters},
                                    {"gather", g.gather},
                                    {"pruned_ratio", g.pruned_ratio}});
        }
        j["grouped"].push_back(std::move(jl));
    }
    j["dense"] = nlohmann::json::array();
    for (const auto& layer : structure.dense) {
        j["dense"].push_back({{"layer", layer.layer_index}, {"kept_filters", layer.kept_filters}});
    }
    return j.dump(2);
}

PrunedStructure structure_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("structure file: ") + e.what());
    }
    try {
        PrunedStructure structure;
        structure.beta = j.at("beta").get<double>();
        structure.group_count = j.at("group_count").get<std::int64_t>();
        for (const auto& jl : j.at("grouped")) {
            GroupedLayerPruning layer;
            layer.layer_index = jl.at("layer").get<std::size_t>();
            layer.dense_filters = jl.at("dense_filters").get<std::int64_t>();
            layer.dense_channels = jl.at("dense_channels").get<std::int64_t>();
            for (const auto& jg : jl.at("groups")) {
                PrunedGroup group;
                group.filters = jg.at("filters").get<std::vector<std::int64_t>>();
                group.gather = jg.at("gather").get<std::vector<std::int64_t>>();
                group.pruned_ratio = jg.at("pruned_ratio").get<double>();
                layer.groups.push_back(std::move(group));
            }
            structure.grouped.push_back(std::move(layer));
        }
        for (const auto& jl : j.at("dense")) {
            structure.dense.push_back(DenseLayerPruning{
                jl.at("layer").get<std::size_t>(),
                jl.at("kept_filters").get<std::vector<std::int64_t>>()});
        }
        return structure;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("structure file: ") + e.what());
    }
}

} // namespace dsp
