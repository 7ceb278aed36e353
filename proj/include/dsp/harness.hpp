#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsp/compile.hpp"
#include "dsp/data.hpp"
#include "dsp/grouping.hpp"
#include "dsp/model.hpp"
#include "dsp/pruning.hpp"

namespace dsp {

struct PipelineConfig {
    GroupLearnConfig group;
    double beta = 0.3;
    std::int64_t finetune_epochs = 10;
    double finetune_lr = 0.02;
    std::string data_dir = "data/mnist";
    std::string out_dir = "out";

    void validate() const;
};

// Plain `key = value` lines, '#' comments. Unknown keys are config errors.
PipelineConfig parse_config_file(const std::string& path);
void apply_config_entry(PipelineConfig& config, const std::string& key, const std::string& value);

struct TrainOptions {
    std::int64_t epochs = 40;
    double lr = 0.1;
    double lr_decay = 0.9;
    double momentum = 0.9;
    std::int64_t batch_size = 64;
    std::uint64_t seed = 1;
};

struct TrainResult {
    double final_loss = 0.0;
};

// Plain momentum-SGD training on the task loss. Shares its RNG stream layout
// with the group learner so a lambda=0 group run reproduces it exactly.
TrainResult train_network(Network& net, const Split& train, const Shape& sample_shape,
                          const TrainOptions& options, const MetricsFn& metrics = {},
                          const std::string& phase = "train");

// Phase 3: task-loss-only fine-tuning of the compiled model with best-
// validation checkpoint selection (the pre-finetune state is a candidate).
// Returns the best validation accuracy; the model holds the selected weights.
double finetune(CompiledModel& model, const Split& train, const Split& val,
                const TrainOptions& options, const MetricsFn& metrics = {});

enum class PruneMode { GroupChannels, ChannelBaseline };

struct PipelineReport {
    std::vector<std::pair<std::string, std::string>> fields; // fixed order

    const std::string* find(const std::string& key) const;
    std::string kv() const;   // "key=value" lines
    std::string text() const; // human-readable summary
};

// Algorithm phases 1-3 end to end: group learning, pruning, compilation and
// fine-tuning. Writes checkpoints, structure files, metrics.csv and the
// summary into config.out_dir.
PipelineReport run_pipeline(const PipelineConfig& config, PruneMode mode = PruneMode::GroupChannels);

// Writes text to path via a temp file and rename; no partial files on error.
void atomic_write_text(const std::string& path, const std::string& text);

} // namespace dsp
