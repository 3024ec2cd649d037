#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/mlp.hpp"
#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Model-space attack primitives.
// ---------------------------------------------------------------------------

// Train benign, then submit the negated parameters.
inline LayeredModel sign_flip_model(const LayeredModel& m) { return scale(m, -1.0); }

// Additive Gaussian noise on every parameter.
inline LayeredModel noise_model(const LayeredModel& m, double sigma, std::uint64_t seed) {
    if (!(sigma > 0.0)) throw std::invalid_argument("noise_model: sigma must be positive");
    Rng rng(stream_seed(seed, {stream::attack, 0}));
    LayeredModel out = m;
    for (auto& layer : out.values)
        for (double& x : layer) x += sigma * rng.gaussian();
    return out;
}

// Rescale the update so its Euclidean norm lands on the benign target, with a
// +-3% jitter (Gaussian with a 1% deviation, truncated at three sigma) so
// repeated submissions don't sit at a suspiciously exact value.
inline LayeredModel scale_update_to_benign(const LayeredModel& local, const LayeredModel& global,
                                           double target_eucl, std::uint64_t seed) {
    check_schema(local, global, "scale_update_to_benign");
    if (!(target_eucl > 0.0))
        throw std::invalid_argument("scale_update_to_benign: target must be positive");
    double cur_sq = 0.0;
    for (std::size_t l = 0; l < local.values.size(); ++l)
        for (std::size_t i = 0; i < local.values[l].size(); ++i) {
            const double d = local.values[l][i] - global.values[l][i];
            cur_sq += d * d;
        }
    const double cur = std::sqrt(cur_sq);
    if (cur == 0.0) return local;  // nothing to scale

    Rng rng(stream_seed(seed, {stream::attack, 1}));
    const double jittered = target_eucl * (1.0 + 0.01 * rng.truncated_gaussian(3.0));
    const double factor = jittered / cur;

    LayeredModel out = global;
    for (std::size_t l = 0; l < out.values.size(); ++l)
        for (std::size_t i = 0; i < out.values[l].size(); ++i)
            out.values[l][i] += factor * (local.values[l][i] - global.values[l][i]);
    return out;
}

// Replace the named layers with the donor's (typically benign-trained) ones.
inline LayeredModel fixate_layers(const LayeredModel& m, const LayeredModel& donor,
                                  const std::vector<std::string>& layer_names) {
    check_schema(m, donor, "fixate_layers");
    LayeredModel out = m;
    for (const auto& name : layer_names) {
        bool found = false;
        for (std::size_t l = 0; l < out.names.size(); ++l) {
            if (out.names[l] == name) {
                out.values[l] = donor.values[l];
                found = true;
                break;
            }
        }
        if (!found) throw std::invalid_argument("fixate_layers: unknown layer " + name);
    }
    return out;
}

// Clamp per-coordinate update magnitudes into the benign [min, max] band:
// magnitudes above max_target are cut down, nonzero magnitudes below
// min_target are raised.  Either bound may be absent.  Zero deltas stay zero.
inline LayeredModel clip_outliers_to_benign(const LayeredModel& local, const LayeredModel& global,
                                            std::optional<double> min_target,
                                            std::optional<double> max_target) {
    check_schema(local, global, "clip_outliers_to_benign");
    if (min_target && !(*min_target > 0.0))
        throw std::invalid_argument("clip_outliers_to_benign: min target must be positive");
    if (max_target && !(*max_target > 0.0))
        throw std::invalid_argument("clip_outliers_to_benign: max target must be positive");
    if (min_target && max_target && *min_target > *max_target)
        throw std::invalid_argument("clip_outliers_to_benign: min target above max target");

    LayeredModel out = global;
    for (std::size_t l = 0; l < out.values.size(); ++l) {
        for (std::size_t i = 0; i < out.values[l].size(); ++i) {
            double d = local.values[l][i] - global.values[l][i];
            const double ad = std::abs(d);
            if (ad > 0.0) {
                if (max_target && ad > *max_target) d = std::copysign(*max_target, d);
                else if (min_target && ad < *min_target) d = std::copysign(*min_target, d);
            }
            out.values[l][i] += d;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adaptive multi-objective training.
// ---------------------------------------------------------------------------

// The adversary's dry run: a benign model trained on its own clean data, plus
// the whole-model metric values that model would show against the global.
struct BenignProbe {
    LayeredModel benign_model;
    std::array<double, metric_count> values{};
    std::array<bool, metric_count> present{};
};

inline BenignProbe make_benign_probe(const LayeredModel& global, const MlpArchitecture& arch,
                                     const ClientDataset& clean_data, const TrainHyperparams& hp) {
    BenignProbe p;
    p.benign_model = train_local(global, arch, clean_data, hp);
    const MetricSet ms = compute_metric_set(p.benign_model, global);
    p.values = ms.per_scope.front().value;   // whole-model scope
    p.present = ms.per_scope.front().present;
    return p;
}

struct AdaptiveSpec {
    std::vector<Metric> objectives;  // any of eucl/cos/var (trained) or min/max (clipped after)
    std::vector<double> targets;     // parallel benign target values
    double alpha = 0.3;              // weight of the task loss in the composite
};

inline void validate_adaptive_spec(const AdaptiveSpec& spec) {
    if (spec.objectives.size() != spec.targets.size())
        throw std::invalid_argument("adaptive: objectives/targets size mismatch");
    if (spec.alpha < 0.0 || spec.alpha > 1.0)
        throw std::invalid_argument("adaptive: alpha outside [0, 1]");
    for (Metric m : spec.objectives)
        if (m == Metric::count)
            throw std::invalid_argument(
                "adaptive: count has a zero gradient almost everywhere and cannot be an objective");
}

// Relative loss weights that bring every first-batch loss up to the largest
// one: lambda_i = max_j losses[j] / losses[i].  A zero entry gets weight 1
// (it is already at its target; |.| has no direction there anyway).
inline std::vector<double> scale_to_max(const std::vector<double>& losses) {
    if (losses.empty()) throw std::invalid_argument("scale_to_max: empty loss list");
    double mx = 0.0;
    for (double l : losses) {
        if (l < 0.0) throw std::invalid_argument("scale_to_max: negative loss");
        mx = std::max(mx, l);
    }
    std::vector<double> lambdas(losses.size(), 1.0);
    if (mx == 0.0) return lambdas;
    for (std::size_t i = 0; i < losses.size(); ++i)
        lambdas[i] = losses[i] > 0.0 ? mx / losses[i] : 1.0;
    return lambdas;
}

namespace detail {

// Composite objective: alpha * task + (1 - alpha) * sum_i lambda_i *
// |metric_i(model) - target_i|.  The lambdas are frozen on the first batch
// from the loss values observed there (task loss included in the max), and
// never recomputed.
class AdaptiveObjective final : public ExtraObjective {
public:
    AdaptiveObjective(const AdaptiveSpec& spec, const LayeredModel& global)
        : spec_(spec), global_flat_(flatten(global)) {}

    double task_weight() const override { return spec_.alpha; }

    double add_term(const LayeredModel& model, double task_loss, LayeredModel& grad) override {
        const std::vector<double> local_flat = flatten(model);
        const double adaption_weight = 1.0 - spec_.alpha;

        std::vector<double> term_losses(spec_.objectives.size());
        std::vector<ValueGrad> term_grads(spec_.objectives.size());
        for (std::size_t i = 0; i < spec_.objectives.size(); ++i) {
            switch (spec_.objectives[i]) {
                case Metric::eucl: term_grads[i] = eucl_value_grad(local_flat, global_flat_); break;
                case Metric::cos: term_grads[i] = cos_value_grad(local_flat, global_flat_); break;
                case Metric::var: term_grads[i] = var_value_grad(local_flat); break;
                default:
                    throw std::invalid_argument("adaptive: objective is not differentiable");
            }
            term_losses[i] = std::abs(term_grads[i].value - spec_.targets[i]);
        }

        if (!frozen_) {
            std::vector<double> first = {task_loss};
            first.insert(first.end(), term_losses.begin(), term_losses.end());
            const auto lambdas = scale_to_max(first);
            lambdas_.assign(lambdas.begin() + 1, lambdas.end());
            frozen_ = true;
        }

        double extra_loss = 0.0;
        std::size_t flat_pos = 0;
        // Accumulate all weighted term gradients into one flat buffer first,
        // then scatter across the layered gradient once.
        std::vector<double> gsum(local_flat.size(), 0.0);
        for (std::size_t i = 0; i < spec_.objectives.size(); ++i) {
            const double diff = term_grads[i].value - spec_.targets[i];
            const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            const double w = adaption_weight * lambdas_[i] * s;
            extra_loss += adaption_weight * lambdas_[i] * term_losses[i];
            if (w != 0.0)
                for (std::size_t k = 0; k < gsum.size(); ++k)
                    gsum[k] += w * term_grads[i].grad[k];
        }
        for (auto& layer : grad.values)
            for (double& g : layer) g += gsum[flat_pos++];
        return extra_loss;
    }

    const std::vector<double>& lambdas() const { return lambdas_; }

private:
    AdaptiveSpec spec_;
    std::vector<double> global_flat_;
    std::vector<double> lambdas_;
    bool frozen_ = false;
};

}  // namespace detail

// Train on the (typically poisoned) data while steering the whole-model
// metrics toward benign target values.  With alpha = 1 this is exactly
// train_local.  Only eucl/cos/var may appear here; min/max outliers are
// handled by clip_outliers_to_benign once training is done.
inline LayeredModel adaptive_train(const LayeredModel& init, const MlpArchitecture& arch,
                                   const ClientDataset& data, const TrainHyperparams& hp,
                                   const AdaptiveSpec& spec, const LayeredModel& global) {
    validate_adaptive_spec(spec);
    for (Metric m : spec.objectives)
        if (m != Metric::eucl && m != Metric::cos && m != Metric::var)
            throw std::invalid_argument("adaptive_train: only eucl/cos/var are trainable");
    if (spec.alpha == 1.0) return train_local(init, arch, data, hp);
    detail::AdaptiveObjective obj(spec, global);
    return train_local(init, arch, data, hp, &obj);
}

// ---------------------------------------------------------------------------
// Attack pipeline description.  The data-space half (PoisonSpec) is applied
// to the adversary's datasets at setup; the steps below transform the trained
// model before submission, in listed order.
// ---------------------------------------------------------------------------

enum class PostStepKind { sign_flip, noise, scale_to_benign_eucl, fixate };

inline const char* post_step_name(PostStepKind k) {
    switch (k) {
        case PostStepKind::sign_flip: return "sign_flip";
        case PostStepKind::noise: return "noise";
        case PostStepKind::scale_to_benign_eucl: return "scale_to_benign_eucl";
        case PostStepKind::fixate: return "fixate";
    }
    return "?";
}

struct PostStep {
    PostStepKind kind = PostStepKind::sign_flip;
    double sigma = 0.01;              // noise
    std::vector<std::string> layers;  // fixate
};

struct AttackSpec {
    PoisonSpec poison;                    // may be kind none (pure model attack)
    std::optional<AdaptiveSpec> adaptive; // targets resolved from probes at runtime
    std::vector<PostStep> post;

    bool any_attack() const {
        return poison.kind != PoisonKind::none || adaptive.has_value() || !post.empty();
    }

    // Whether the adversary must dry-run benign training this round.
    bool needs_probe() const {
        if (adaptive) return true;
        for (const auto& s : post)
            if (s.kind == PostStepKind::scale_to_benign_eucl || s.kind == PostStepKind::fixate)
                return true;
        return false;
    }
};

}  // namespace fedsim
