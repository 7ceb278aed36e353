#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dsp/data.hpp"
#include "dsp/model.hpp"
#include "dsp/optim.hpp"
#include "dsp/rng.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

// Reading of the |alpha|_0.5 factor in the group regularizer. QuasiNorm is
// the standard L_{1/2} formula (sum of square roots, squared); SqrtSum keeps
// just the sum of square roots and is exposed for experimentation.
enum class LHalfMode { QuasiNorm, SqrtSum };

struct GroupLearnConfig {
    std::int64_t groups = 2;    // N
    double lambda = 1e-3;       // regularization strength
    double tau = 0.5;           // gumbel-softmax temperature
    double adapt_lr = 0.1;      // inner one-step learning rate
    double alpha_lr = 1e-3;     // Adam rate for the group logits
    double weight_lr = 0.1;     // momentum SGD rate for the weights
    double weight_momentum = 0.9;
    double lr_decay = 0.9;      // per-epoch exponential decay of weight_lr
    std::int64_t epochs = 40;
    std::int64_t batch_size = 64;
    std::uint64_t seed = 1;
    LHalfMode l_half = LHalfMode::QuasiNorm;
    double logit_floor = 1e-6;  // positivity projection after logit updates

    void validate() const; // ConfigError on out-of-range values
};

// Learnable group logits for one grouped layer. The logits stay strictly
// positive (they appear inside a log); updates are projected onto
// [logit_floor, inf).
struct GroupParameters {
    std::size_t layer_index = 0;
    Tensor logits; // [filters, groups]
    double tau = 0.5;
    std::int64_t group_count = 1;
};

GroupParameters make_group_parameters(std::size_t layer_index, std::int64_t filters,
                                      std::int64_t groups, double tau);

// A relaxed assignment drawn with the gumbel-softmax trick; `alpha` stays on
// the tape of its logits so gradients flow back to them.
struct AlphaSample {
    std::size_t layer_index = 0;
    Tensor alpha; // [filters, groups], rows sum to 1
    Tensor noise; // the Gumbel(0,1) draws used
};

AlphaSample sample_alpha(const GroupParameters& params, Rng& rng);
// Frozen-noise variant for gradient tests.
AlphaSample sample_alpha_with_noise(const GroupParameters& params, const Tensor& noise);

// Per-layer lambda scaling: sqrt(filters * kernel_h * kernel_w), the usual
// group-lasso dimensionality correction.
double conv_reg_scale(const ConvLayerSpec& conv);

struct RegularizerTerm {
    Tensor weight; // [Cout, Cin, Kh, Kw]
    Tensor alpha;  // [Cout, N]
    double scale = 1.0;
};

// R = sum_i scale_i * sum_p sum_m |alpha_{:,p}|_0.5 * sqrt(sum_k alpha_{k,p}^2 ||W_{k,m}||^2).
// Differentiable in both weights and alphas; sqrt is guarded at zero with
// subgradient zero.
Tensor group_regularizer(const std::vector<RegularizerTerm>& terms, LHalfMode mode);

// Exact closed-form product (d^2 R / dalpha dW) * wprime_grad for one layer,
// evaluated at the given weight and alpha values. Returns a [filters, groups]
// value tensor (no graph).
Tensor regularizer_mixed_hvp(const Tensor& weight, const Tensor& alpha,
                             const Tensor& wprime_grad, double scale, LHalfMode mode);

// Mean over filters of the entropy (nats) of the normalized logits.
double logits_entropy(const GroupParameters& params);
// Mean over filters of the max normalized-logit probability.
double mean_max_probability(const GroupParameters& params);

struct AdaptResult {
    std::vector<Tensor> adapted;                 // one-step adapted parameter values
    std::vector<std::vector<double>> base_grads; // grad of (L + lambda R) at the start point
    double loss = 0.0;
    double reg = 0.0;
};

// Joint learner for phase 1: alternating updates of the group logits (Adam on
// the unrolled objective) and the weights (momentum SGD on L + lambda R).
class GroupLearner {
public:
    GroupLearner(Network& net, GroupLearnConfig config);

    std::vector<GroupParameters>& group_parameters() { return group_params_; }
    const GroupLearnConfig& config() const { return config_; }

    std::vector<AlphaSample> sample(Rng& gumbel_rng) const;

    // R over the grouped layers at the current weights. With detach_alpha the
    // alphas enter as constants (used for the weight-side objective).
    Tensor regularizer(const std::vector<AlphaSample>& alphas, bool detach_alpha) const;

    AdaptResult one_step_adapt(const Tensor& batch, const std::vector<std::int64_t>& labels,
                               const std::vector<AlphaSample>& alphas);

    // Unrolled gradient of the upper-level objective w.r.t. each grouped
    // layer's logits; also left in logits.grad(). Reuses `adapt` when given.
    std::vector<Tensor> alpha_gradient(const Tensor& batch, const std::vector<std::int64_t>& labels,
                                       const std::vector<AlphaSample>& alphas);
    std::vector<Tensor> alpha_gradient(const Tensor& batch, const std::vector<std::int64_t>& labels,
                                       const std::vector<AlphaSample>& alphas,
                                       const AdaptResult& adapt);

    struct StepStats {
        double loss = 0.0;
        double reg = 0.0;
    };
    StepStats step(const Tensor& batch, const std::vector<std::int64_t>& labels, Rng& gumbel_rng,
                   double weight_lr);

private:
    Network& net_;
    GroupLearnConfig config_;
    std::vector<GroupParameters> group_params_;
    std::vector<std::size_t> grouped_layers_;
    std::vector<std::size_t> grouped_param_index_; // weight slot per grouped layer
    Adam logit_optimizer_;
    SgdMomentum weight_optimizer_;

    std::vector<Tensor> logits_tensors();
    void project_logits();
};

struct EpochMetrics {
    std::string phase;
    std::int64_t epoch = 0;
    double loss = 0.0;
    double reg = 0.0;
    double val_accuracy = -1.0;          // < 0 when not evaluated
    std::vector<double> group_entropy;   // one per grouped layer
};

using MetricsFn = std::function<void(const EpochMetrics&)>;

struct GroupLearnResult {
    std::vector<GroupParameters> params;
    double final_loss = 0.0;
};

// Phase 1 of the pipeline: trains `net` in place and learns group logits.
GroupLearnResult group_learning_phase(Network& net, const Split& train, const Shape& sample_shape,
                                      const GroupLearnConfig& config,
                                      const MetricsFn& metrics = {});

} // namespace dsp
