#include "dsp/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "dsp/errors.hpp"

namespace dsp {

void GroupLearnConfig::validate() const {
    if (groups < 1) throw ConfigError("groups must be >= 1, got " + std::to_string(groups));
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0, got " + std::to_string(lambda));
    if (tau <= 0.0) throw ConfigError("tau must be > 0, got " + std::to_string(tau));
    if (adapt_lr < 0.0) throw ConfigError("adapt_lr must be >= 0");
    if (alpha_lr <= 0.0 || weight_lr <= 0.0) throw ConfigError("learning rates must be > 0");
    if (lr_decay <= 0.0 || lr_decay > 1.0) throw ConfigError("lr_decay must be in (0, 1]");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (logit_floor <= 0.0) throw ConfigError("logit_floor must be > 0");
}

GroupParameters make_group_parameters(std::size_t layer_index, std::int64_t filters,
                                      std::int64_t groups, double tau) {
    if (filters < 1 || groups < 1) {
        throw ConfigError("group parameters need filters >= 1 and groups >= 1");
    }
    if (tau <= 0.0) throw ConfigError("tau must be > 0");
    GroupParameters gp;
    gp.layer_index = layer_index;
    // uniform start: all-ones logits, ties broken by the gumbel noise
    gp.logits = Tensor::full({filters, groups}, 1.0, true);
    gp.tau = tau;
    gp.group_count = groups;
    return gp;
}

namespace {

void check_logits_positive(const GroupParameters& params) {
    for (const double v : params.logits.data()) {
        if (!(v > 0.0)) {
            throw DomainError("group logits must be strictly positive, found " + std::to_string(v));
        }
    }
}

AlphaSample relax(const GroupParameters& params, Tensor noise) {
    check_logits_positive(params);
    if (noise.shape() != params.logits.shape()) {
        throw ShapeError("gumbel noise shape " + shape_to_string(noise.shape()) +
                         " does not match logits " + shape_to_string(params.logits.shape()));
    }
    AlphaSample sample;
    sample.layer_index = params.layer_index;
    sample.noise = std::move(noise);
    sample.alpha = softmax_rows(scale(add(log(params.logits), sample.noise), 1.0 / params.tau));
    return sample;
}

} // namespace

AlphaSample sample_alpha(const GroupParameters& params, Rng& rng) {
    std::vector<double> g(params.logits.data().size());
    for (auto& v : g) v = rng.gumbel();
    return relax(params, Tensor::from_data(params.logits.shape(), std::move(g)));
}

AlphaSample sample_alpha_with_noise(const GroupParameters& params, const Tensor& noise) {
    return relax(params, noise.detach());
}

double conv_reg_scale(const ConvLayerSpec& conv) {
    return std::sqrt(static_cast<double>(conv.out_channels * conv.kernel_h * conv.kernel_w));
}

namespace {

// Shared forward quantities of one regularizer term; cached for backward and
// reused by the mixed second derivative.
struct RegTermStats {
    std::int64_t cout = 0, cin = 0, groups = 0, kernel = 0;
    std::vector<double> w_km;       // [cout, cin] squared kernel norms
    std::vector<double> n_pm;       // [groups, cin] sqrt(sum_k alpha^2 w)
    std::vector<double> sqrt_alpha; // [cout, groups]
    std::vector<double> s_col;      // [groups] sum_k sqrt(alpha)
    std::vector<double> c_col;      // [groups] |alpha_:,p|_0.5
    double value = 0.0;
};

RegTermStats term_stats(const Tensor& weight, const Tensor& alpha, LHalfMode mode) {
    if (weight.rank() != 4) {
        throw ShapeError("regularizer weight must be 4-d, got " + shape_to_string(weight.shape()));
    }
    if (alpha.rank() != 2 || alpha.dim(0) != weight.dim(0)) {
        throw ShapeError("alpha " + shape_to_string(alpha.shape()) +
                         " does not align with weight " + shape_to_string(weight.shape()));
    }
    RegTermStats st;
    st.cout = weight.dim(0);
    st.cin = weight.dim(1);
    st.groups = alpha.dim(1);
    st.kernel = weight.dim(2) * weight.dim(3);

    st.w_km.assign(static_cast<std::size_t>(st.cout * st.cin), 0.0);
    const double* w = weight.data().data();
    for (std::int64_t k = 0; k < st.cout; ++k) {
        for (std::int64_t m = 0; m < st.cin; ++m) {
            const double* kern = w + (k * st.cin + m) * st.kernel;
            double s = 0.0;
            for (std::int64_t i = 0; i < st.kernel; ++i) s += kern[i] * kern[i];
            st.w_km[static_cast<std::size_t>(k * st.cin + m)] = s;
        }
    }

    const double* a = alpha.data().data();
    st.sqrt_alpha.assign(alpha.data().size(), 0.0);
    st.s_col.assign(static_cast<std::size_t>(st.groups), 0.0);
    for (std::int64_t k = 0; k < st.cout; ++k) {
        for (std::int64_t p = 0; p < st.groups; ++p) {
            const double av = a[k * st.groups + p];
            if (av < 0.0) {
                throw DomainError("alpha entries must be non-negative, found " + std::to_string(av));
            }
            const double r = std::sqrt(av);
            st.sqrt_alpha[static_cast<std::size_t>(k * st.groups + p)] = r;
            st.s_col[static_cast<std::size_t>(p)] += r;
        }
    }
    st.c_col.resize(static_cast<std::size_t>(st.groups));
    for (std::int64_t p = 0; p < st.groups; ++p) {
        const double s = st.s_col[static_cast<std::size_t>(p)];
        st.c_col[static_cast<std::size_t>(p)] = mode == LHalfMode::QuasiNorm ? s * s : s;
    }

    st.n_pm.assign(static_cast<std::size_t>(st.groups * st.cin), 0.0);
    for (std::int64_t p = 0; p < st.groups; ++p) {
        for (std::int64_t m = 0; m < st.cin; ++m) {
            double s = 0.0;
            for (std::int64_t k = 0; k < st.cout; ++k) {
                const double av = a[k * st.groups + p];
                s += av * av * st.w_km[static_cast<std::size_t>(k * st.cin + m)];
            }
            const double n = std::sqrt(s);
            st.n_pm[static_cast<std::size_t>(p * st.cin + m)] = n;
            st.value += st.c_col[static_cast<std::size_t>(p)] * n;
        }
    }
    return st;
}

// d c_p / d alpha_{k,p}; subgradient 0 when alpha hits 0.
double dc_dalpha(const RegTermStats& st, std::int64_t k, std::int64_t p, LHalfMode mode) {
    const double r = st.sqrt_alpha[static_cast<std::size_t>(k * st.groups + p)];
    if (r <= 0.0) return 0.0;
    return mode == LHalfMode::QuasiNorm ? st.s_col[static_cast<std::size_t>(p)] / r : 0.5 / r;
}

} // namespace

Tensor group_regularizer(const std::vector<RegularizerTerm>& terms, LHalfMode mode) {
    auto stats = std::make_shared<std::vector<RegTermStats>>();
    stats->reserve(terms.size());
    double total = 0.0;
    for (const auto& term : terms) {
        stats->push_back(term_stats(term.weight, term.alpha, mode));
        total += term.scale * stats->back().value;
    }
    std::vector<Tensor> inputs;
    for (const auto& term : terms) {
        inputs.push_back(term.weight);
        inputs.push_back(term.alpha);
    }
    auto terms_copy = std::make_shared<std::vector<RegularizerTerm>>(terms);
    return Tensor::make({}, {total}, inputs, [terms_copy, stats, mode](detail::TensorNode& self) {
        const double go = self.grad[0];
        for (std::size_t t = 0; t < terms_copy->size(); ++t) {
            const auto& term = (*terms_copy)[t];
            const auto& st = (*stats)[t];
            const double f = go * term.scale;
            if (term.weight.requires_grad()) {
                std::vector<double> dw(term.weight.data().size(), 0.0);
                const double* w = term.weight.data().data();
                const double* a = term.alpha.data().data();
                for (std::int64_t k = 0; k < st.cout; ++k) {
                    for (std::int64_t m = 0; m < st.cin; ++m) {
                        double coef = 0.0;
                        for (std::int64_t p = 0; p < st.groups; ++p) {
                            const double n = st.n_pm[static_cast<std::size_t>(p * st.cin + m)];
                            if (n <= 0.0) continue;
                            const double av = a[k * st.groups + p];
                            coef += st.c_col[static_cast<std::size_t>(p)] * av * av / n;
                        }
                        const double* kern = w + (k * st.cin + m) * st.kernel;
                        double* dk = dw.data() + (k * st.cin + m) * st.kernel;
                        for (std::int64_t i = 0; i < st.kernel; ++i) dk[i] = f * coef * kern[i];
                    }
                }
                term.weight.node()->ensure_grad();
                auto& dst = term.weight.node()->grad;
                for (std::size_t i = 0; i < dw.size(); ++i) dst[i] += dw[i];
            }
            if (term.alpha.requires_grad()) {
                std::vector<double> da(term.alpha.data().size(), 0.0);
                const double* a = term.alpha.data().data();
                for (std::int64_t k = 0; k < st.cout; ++k) {
                    for (std::int64_t p = 0; p < st.groups; ++p) {
                        double sum_n = 0.0, sum_w_over_n = 0.0;
                        for (std::int64_t m = 0; m < st.cin; ++m) {
                            const double n = st.n_pm[static_cast<std::size_t>(p * st.cin + m)];
                            sum_n += n;
                            if (n > 0.0) {
                                sum_w_over_n +=
                                    st.w_km[static_cast<std::size_t>(k * st.cin + m)] / n;
                            }
                        }
                        const double av = a[k * st.groups + p];
                        da[static_cast<std::size_t>(k * st.groups + p)] =
                            f * (dc_dalpha(st, k, p, mode) * sum_n +
                                 st.c_col[static_cast<std::size_t>(p)] * av * sum_w_over_n);
                    }
                }
                term.alpha.node()->ensure_grad();
                auto& dst = term.alpha.node()->grad;
                for (std::size_t i = 0; i < da.size(); ++i) dst[i] += da[i];
            }
        }
    });
}

Tensor regularizer_mixed_hvp(const Tensor& weight, const Tensor& alpha, const Tensor& wprime_grad,
                             double scale, LHalfMode mode) {
    if (wprime_grad.shape() != weight.shape()) {
        throw ShapeError("wprime_grad " + shape_to_string(wprime_grad.shape()) +
                         " does not match weight " + shape_to_string(weight.shape()));
    }
    const RegTermStats st = term_stats(weight, alpha, mode);
    const double* w = weight.data().data();
    const double* g = wprime_grad.data().data();
    const double* a = alpha.data().data();

    // D_km = <W_km, G_km>, E_pm = sum_k alpha_{k,p}^2 D_km
    std::vector<double> d_km(static_cast<std::size_t>(st.cout * st.cin), 0.0);
    for (std::int64_t k = 0; k < st.cout; ++k) {
        for (std::int64_t m = 0; m < st.cin; ++m) {
            const double* kern = w + (k * st.cin + m) * st.kernel;
            const double* gk = g + (k * st.cin + m) * st.kernel;
            double s = 0.0;
            for (std::int64_t i = 0; i < st.kernel; ++i) s += kern[i] * gk[i];
            d_km[static_cast<std::size_t>(k * st.cin + m)] = s;
        }
    }
    std::vector<double> e_pm(static_cast<std::size_t>(st.groups * st.cin), 0.0);
    for (std::int64_t p = 0; p < st.groups; ++p) {
        for (std::int64_t m = 0; m < st.cin; ++m) {
            double s = 0.0;
            for (std::int64_t k = 0; k < st.cout; ++k) {
                const double av = a[k * st.groups + p];
                s += av * av * d_km[static_cast<std::size_t>(k * st.cin + m)];
            }
            e_pm[static_cast<std::size_t>(p * st.cin + m)] = s;
        }
    }

    std::vector<double> out(alpha.data().size(), 0.0);
    for (std::int64_t k = 0; k < st.cout; ++k) {
        for (std::int64_t p = 0; p < st.groups; ++p) {
            const double av = a[k * st.groups + p];
            const double dc = dc_dalpha(st, k, p, mode);
            const double cp = st.c_col[static_cast<std::size_t>(p)];
            double s = 0.0;
            for (std::int64_t m = 0; m < st.cin; ++m) {
                const double n = st.n_pm[static_cast<std::size_t>(p * st.cin + m)];
                if (n <= 0.0) continue;
                const double e = e_pm[static_cast<std::size_t>(p * st.cin + m)];
                const double d = d_km[static_cast<std::size_t>(k * st.cin + m)];
                const double wkm = st.w_km[static_cast<std::size_t>(k * st.cin + m)];
                s += dc * e / n + 2.0 * cp * av * d / n - cp * av * wkm * e / (n * n * n);
            }
            out[static_cast<std::size_t>(k * st.groups + p)] = scale * s;
        }
    }
    return Tensor::from_data(alpha.shape(), std::move(out));
}

double logits_entropy(const GroupParameters& params) {
    const std::int64_t rows = params.logits.dim(0), cols = params.logits.dim(1);
    const double* pv = params.logits.data().data();
    double total = 0.0;
    for (std::int64_t k = 0; k < rows; ++k) {
        double z = 0.0;
        for (std::int64_t p = 0; p < cols; ++p) z += pv[k * cols + p];
        double h = 0.0;
        for (std::int64_t p = 0; p < cols; ++p) {
            const double prob = pv[k * cols + p] / z;
            if (prob > 0.0) h -= prob * std::log(prob);
        }
        total += h;
    }
    return total / static_cast<double>(rows);
}

double mean_max_probability(const GroupParameters& params) {
    const std::int64_t rows = params.logits.dim(0), cols = params.logits.dim(1);
    const double* pv = params.logits.data().data();
    double total = 0.0;
    for (std::int64_t k = 0; k < rows; ++k) {
        double z = 0.0, mx = 0.0;
        for (std::int64_t p = 0; p < cols; ++p) {
            z += pv[k * cols + p];
            mx = std::max(mx, pv[k * cols + p]);
        }
        total += mx / z;
    }
    return total / static_cast<double>(rows);
}

GroupLearner::GroupLearner(Network& net, GroupLearnConfig config)
    : net_(net),
      config_(std::move(config)),
      logit_optimizer_(config_.alpha_lr),
      weight_optimizer_(config_.weight_momentum) {
    config_.validate();
    grouped_layers_ = net_.spec.grouped_layers();
    for (const std::size_t li : grouped_layers_) {
        const auto& conv = std::get<ConvLayerSpec>(net_.spec.layers[li]);
        group_params_.push_back(
            make_group_parameters(li, conv.out_channels, config_.groups, config_.tau));
    }
    // weight slot index per grouped layer within the parameter order
    const auto slots = net_.parameter_slots();
    for (const std::size_t li : grouped_layers_) {
        Tensor* target = &net_.state[li].weight;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (slots[i] == target) {
                grouped_param_index_.push_back(i);
                break;
            }
        }
    }
}

std::vector<AlphaSample> GroupLearner::sample(Rng& gumbel_rng) const {
    std::vector<AlphaSample> out;
    out.reserve(group_params_.size());
    for (const auto& gp : group_params_) out.push_back(sample_alpha(gp, gumbel_rng));
    return out;
}

Tensor GroupLearner::regularizer(const std::vector<AlphaSample>& alphas, bool detach_alpha) const {
    std::vector<RegularizerTerm> terms;
    for (std::size_t i = 0; i < grouped_layers_.size(); ++i) {
        const std::size_t li = grouped_layers_[i];
        const auto& conv = std::get<ConvLayerSpec>(net_.spec.layers[li]);
        terms.push_back(RegularizerTerm{
            net_.state[li].weight,
            detach_alpha ? alphas[i].alpha.detach() : alphas[i].alpha,
            conv_reg_scale(conv),
        });
    }
    return group_regularizer(terms, config_.l_half);
}

AdaptResult GroupLearner::one_step_adapt(const Tensor& batch,
                                         const std::vector<std::int64_t>& labels,
                                         const std::vector<AlphaSample>& alphas) {
    net_.zero_grad();
    Tensor logits_out = net_.forward(batch, BatchNormMode::Train);
    Tensor task_loss = softmax_cross_entropy(logits_out, labels);
    Tensor reg = regularizer(alphas, /*detach_alpha=*/true);
    Tensor total = add(task_loss, scale(reg, config_.lambda));
    total.backward();

    AdaptResult result;
    result.loss = task_loss.value();
    result.reg = reg.value();
    const auto params = net_.parameters();
    result.adapted.reserve(params.size());
    result.base_grads.reserve(params.size());
    for (const auto& p : params) {
        const auto& g = p.grad();
        result.base_grads.push_back(g);
        std::vector<double> adapted(p.data().size());
        for (std::size_t i = 0; i < adapted.size(); ++i) {
            adapted[i] = p.data()[i] - config_.adapt_lr * g[i];
        }
        result.adapted.push_back(Tensor::from_data(p.shape(), std::move(adapted), true));
    }
    return result;
}

std::vector<Tensor> GroupLearner::alpha_gradient(const Tensor& batch,
                                                 const std::vector<std::int64_t>& labels,
                                                 const std::vector<AlphaSample>& alphas) {
    return alpha_gradient(batch, labels, alphas, one_step_adapt(batch, labels, alphas));
}

std::vector<Tensor> GroupLearner::alpha_gradient(const Tensor& batch,
                                                 const std::vector<std::int64_t>& labels,
                                                 const std::vector<AlphaSample>& alphas,
                                                 const AdaptResult& adapt) {
    for (auto& gp : group_params_) gp.logits.zero_grad();

    // Outer objective at the adapted weights, alphas on the tape: one backward
    // yields grad_{W'}(L + lambda R) and the direct alpha term chained to the
    // logits.
    Tensor logits_out = net_.forward_with(adapt.adapted, batch, BatchNormMode::TrainFrozenStats);
    Tensor task_loss = softmax_cross_entropy(logits_out, labels);
    std::vector<RegularizerTerm> terms;
    for (std::size_t i = 0; i < grouped_layers_.size(); ++i) {
        const std::size_t li = grouped_layers_[i];
        const auto& conv = std::get<ConvLayerSpec>(net_.spec.layers[li]);
        terms.push_back(RegularizerTerm{adapt.adapted[grouped_param_index_[i]], alphas[i].alpha,
                                        conv_reg_scale(conv)});
    }
    Tensor reg = group_regularizer(terms, config_.l_half);
    Tensor total = add(task_loss, scale(reg, config_.lambda));
    total.backward();

    // Unrolling term: -eps*lambda * (d^2 R / dalpha dW) * grad_{W'}(L + lambda R),
    // chained to the logits through the sampling graph.
    for (std::size_t i = 0; i < grouped_layers_.size(); ++i) {
        const std::size_t li = grouped_layers_[i];
        const auto& conv = std::get<ConvLayerSpec>(net_.spec.layers[li]);
        const Tensor& wprime = adapt.adapted[grouped_param_index_[i]];
        Tensor gprime = Tensor::from_data(wprime.shape(), wprime.grad());
        Tensor hvp = regularizer_mixed_hvp(net_.state[li].weight, alphas[i].alpha.detach(), gprime,
                                           conv_reg_scale(conv), config_.l_half);
        Tensor seed = scale(hvp, -config_.adapt_lr * config_.lambda);
        Tensor pseudo = reduce_sum(mul(alphas[i].alpha, seed));
        pseudo.backward();
    }

    std::vector<Tensor> out;
    for (auto& gp : group_params_) {
        out.push_back(Tensor::from_data(gp.logits.shape(), gp.logits.grad()));
    }
    return out;
}

std::vector<Tensor> GroupLearner::logits_tensors() {
    std::vector<Tensor> out;
    for (auto& gp : group_params_) out.push_back(gp.logits);
    return out;
}

void GroupLearner::project_logits() {
    for (auto& gp : group_params_) {
        for (auto& v : gp.logits.data()) v = std::max(v, config_.logit_floor);
    }
}

GroupLearner::StepStats GroupLearner::step(const Tensor& batch,
                                           const std::vector<std::int64_t>& labels, Rng& gumbel_rng,
                                           double weight_lr) {
    const auto alphas = sample(gumbel_rng);
    AdaptResult adapt = one_step_adapt(batch, labels, alphas);
    alpha_gradient(batch, labels, alphas, adapt);

    auto logits = logits_tensors();
    logit_optimizer_.step(logits);
    project_logits();

    // net_.parameters() grads still hold grad(L + lambda R) from the adapt pass
    auto params = net_.parameters();
    weight_optimizer_.step(params, weight_lr);
    net_.zero_grad();
    for (auto& gp : group_params_) gp.logits.zero_grad();

    return StepStats{adapt.loss, adapt.reg};
}

GroupLearnResult group_learning_phase(Network& net, const Split& train, const Shape& sample_shape,
                                      const GroupLearnConfig& config, const MetricsFn& metrics) {
    config.validate();
    GroupLearner learner(net, config);
    Rng shuffle_rng = Rng::stream(config.seed, rng_stream::kShuffle);
    Rng gumbel_rng = Rng::stream(config.seed, rng_stream::kGumbel);

    std::vector<std::int64_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    double epoch_loss = 0.0;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order.begin(), order.end());
        const double lr = config.weight_lr * std::pow(config.lr_decay, static_cast<double>(epoch));
        double loss_sum = 0.0, reg_sum = 0.0;
        std::int64_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<std::int64_t> idx(order.begin() + start, order.begin() + end);
            std::vector<std::int64_t> labels;
            Tensor batch = make_batch(train, idx, sample_shape, labels);
            const auto stats = learner.step(batch, labels, gumbel_rng, lr);
            if (!std::isfinite(stats.loss)) {
                throw DivergenceError("group-learn: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(batches));
            }
            loss_sum += stats.loss;
            reg_sum += stats.reg;
            ++batches;
        }
        epoch_loss = loss_sum / static_cast<double>(std::max<std::int64_t>(1, batches));
        if (metrics) {
            EpochMetrics row;
            row.phase = "group-learn";
            row.epoch = epoch;
            row.loss = epoch_loss;
            row.reg = reg_sum / static_cast<double>(std::max<std::int64_t>(1, batches));
            for (const auto& gp : learner.group_parameters()) {
                row.group_entropy.push_back(logits_entropy(gp));
            }
            metrics(row);
        }
    }

    GroupLearnResult result;
    result.params = learner.group_parameters();
    result.final_loss = epoch_loss;
    return result;
}

} // namespace dsp
