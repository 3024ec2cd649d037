#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedsim/attacks.hpp"
#include "fedsim/data.hpp"
#include "fedsim/defenses.hpp"
#include "fedsim/mlp.hpp"
#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// FedAVG.
// ---------------------------------------------------------------------------

// G' = G + eta * mean(L_i - G), equal client weights.
inline LayeredModel fed_avg(const LayeredModel& global, const std::vector<LayeredModel>& locals,
                            double eta = 1.0) {
    if (locals.empty()) throw std::invalid_argument("fed_avg: no models to aggregate");
    LayeredModel mean_update = zeros_like(global);
    const double w = 1.0 / static_cast<double>(locals.size());
    for (const auto& l : locals) {
        check_schema(l, global, "fed_avg");
        for (std::size_t ly = 0; ly < mean_update.values.size(); ++ly)
            for (std::size_t i = 0; i < mean_update.values[ly].size(); ++i)
                mean_update.values[ly][i] += w * (l.values[ly][i] - global.values[ly][i]);
    }
    LayeredModel out = global;
    add_scaled(out, mean_update, eta);
    return out;
}

// ---------------------------------------------------------------------------
// Federation state and rounds.
// ---------------------------------------------------------------------------

struct ClientState {
    int id = 0;
    bool malicious = false;
    ClientDataset clean_data;
    ClientDataset poisoned_data;  // equals clean_data for benign clients
};

struct FederationState {
    MlpArchitecture arch;
    LayeredModel global;
    TrainHyperparams train_hp;  // rng_seed is recomputed per client and round
    double eta = 1.0;
    std::size_t select_k = 0;  // clients drawn each round (all when == clients.size())
    std::uint64_t seed = 0;
    std::size_t round = 0;
    std::vector<ClientState> clients;
};

// Per-round adversary coordination: probe models trained on each captured
// client's clean data, and the cross-client mean metric targets derived from
// them.  Everything is a pure function of (seed, client id, round).
struct AdversaryPlan {
    bool has_probes = false;
    std::vector<int> probe_ids;             // ascending client ids
    std::vector<BenignProbe> probes;        // parallel to probe_ids
    std::array<double, metric_count> target_mean{};
    std::array<bool, metric_count> target_present{};

    const BenignProbe& probe_for(int id) const {
        for (std::size_t i = 0; i < probe_ids.size(); ++i)
            if (probe_ids[i] == id) return probes[i];
        throw std::logic_error("adversary plan: no probe for client");
    }
};

namespace detail {

// Run fn(i) for i in [0, n) on up to `threads` workers.  Tasks must write to
// disjoint slots; the work split never influences results.
template <typename Fn>
inline void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    if (n == 0) return;
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr error;
    std::mutex error_mu;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

inline std::uint64_t client_round_seed(const FederationState& st, std::uint64_t purpose, int id) {
    return stream_seed(st.seed, {purpose, static_cast<std::uint64_t>(id), st.round});
}

}  // namespace detail

// Select this round's participants: everyone when select_k covers the cohort,
// otherwise a seeded draw without replacement.  Ids come back ascending.
inline std::vector<int> select_clients(const FederationState& st) {
    std::vector<int> ids(st.clients.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = st.clients[i].id;
    if (st.select_k >= ids.size()) return ids;
    Rng rng(stream_seed(st.seed, {stream::selection, st.round}));
    rng.shuffle(ids);
    ids.resize(st.select_k);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Probe benign training for every attacking client and average the resulting
// whole-model metric values: those means are the adversary's targets.
inline AdversaryPlan build_adversary_plan(const FederationState& st, const AttackSpec& attack,
                                          const std::vector<int>& malicious_selected,
                                          std::size_t threads) {
    AdversaryPlan plan;
    if (!attack.needs_probe() || malicious_selected.empty()) return plan;
    plan.has_probes = true;
    plan.probe_ids = malicious_selected;
    plan.probes.resize(malicious_selected.size());

    detail::parallel_for(malicious_selected.size(), threads, [&](std::size_t i) {
        const int id = malicious_selected[i];
        const ClientState& c = st.clients[static_cast<std::size_t>(id)];
        TrainHyperparams hp = st.train_hp;
        hp.rng_seed = detail::client_round_seed(st, stream::probe, id);
        plan.probes[i] = make_benign_probe(st.global, st.arch, c.clean_data, hp);
    });

    std::array<double, metric_count> sum{};
    std::array<std::size_t, metric_count> cnt{};
    for (const auto& p : plan.probes)
        for (std::size_t m = 0; m < metric_count; ++m)
            if (p.present[m]) {
                sum[m] += p.values[m];
                cnt[m] += 1;
            }
    for (std::size_t m = 0; m < metric_count; ++m) {
        plan.target_present[m] = cnt[m] == plan.probes.size() && cnt[m] > 0;
        if (plan.target_present[m]) sum[m] /= static_cast<double>(cnt[m]);
        plan.target_mean[m] = sum[m];
    }
    return plan;
}

// One client's contribution for the current round.  Benign clients (and
// everyone before the attack phase) train on clean data; attacking clients
// train on their poisoned data, optionally under the adaptive composite
// objective, then run the model-space steps.
inline LayeredModel client_round(const FederationState& st, const ClientState& client,
                                 bool attacked, const AttackSpec& attack,
                                 const AdversaryPlan& plan) {
    TrainHyperparams hp = st.train_hp;
    hp.rng_seed = detail::client_round_seed(st, stream::train, client.id);

    if (!attacked || !client.malicious || !attack.any_attack())
        return train_local(st.global, st.arch, client.clean_data, hp);

    auto target_of = [&](Metric m) {
        const std::size_t i = static_cast<std::size_t>(m);
        if (!plan.target_present[i])
            throw std::runtime_error("attack: missing benign target for an objective");
        return plan.target_mean[i];
    };

    LayeredModel model;
    std::optional<double> clip_min, clip_max;
    if (attack.adaptive) {
        // Split objectives: eucl/cos/var are trained, min/max become clips.
        AdaptiveSpec diff;
        diff.alpha = attack.adaptive->alpha;
        for (Metric m : attack.adaptive->objectives) {
            if (m == Metric::min_nz) clip_min = target_of(m);
            else if (m == Metric::max_abs) clip_max = target_of(m);
            else {
                diff.objectives.push_back(m);
                diff.targets.push_back(target_of(m));
            }
        }
        if (diff.objectives.empty() && diff.alpha < 1.0)
            diff.alpha = 1.0;  // nothing trainable: plain training + clips
        model = adaptive_train(st.global, st.arch, client.poisoned_data, hp, diff, st.global);
    } else {
        model = train_local(st.global, st.arch, client.poisoned_data, hp);
    }
    if (clip_min || clip_max)
        model = clip_outliers_to_benign(model, st.global, clip_min, clip_max);

    const std::uint64_t post_seed = detail::client_round_seed(st, stream::attack, client.id);
    for (const PostStep& step : attack.post) {
        switch (step.kind) {
            case PostStepKind::sign_flip:
                model = sign_flip_model(model);
                break;
            case PostStepKind::noise:
                model = noise_model(model, step.sigma, post_seed);
                break;
            case PostStepKind::scale_to_benign_eucl:
                model = scale_update_to_benign(model, st.global,
                                               target_of(Metric::eucl), post_seed);
                break;
            case PostStepKind::fixate:
                model = fixate_layers(model, plan.probe_for(client.id).benign_model, step.layers);
                break;
        }
    }
    return model;
}

struct RoundRecord {
    std::size_t round = 0;
    std::vector<int> selected;
    std::vector<int> malicious_selected;
    std::vector<int> flagged;  // filtered out (keep-set complement / zero trust)
    bool aborted = false;      // defense rejected every model; global unchanged
    double defense_ms = 0.0;
    std::optional<DetectionReport> report;
    std::string note;
};

// Advance the federation by one round: select, train (in parallel), defend,
// aggregate.  `defended` gates both the attack pipeline and the defense; the
// warmup phase runs with it off.
inline RoundRecord run_round(FederationState& st, const AttackSpec& attack,
                             const DefenseSpec& defense, const DefenseContext& base_ctx,
                             bool defended, std::size_t threads) {
    RoundRecord rec;
    rec.round = st.round;
    rec.selected = select_clients(st);

    for (int id : rec.selected)
        if (st.clients[static_cast<std::size_t>(id)].malicious)
            rec.malicious_selected.push_back(id);

    const AdversaryPlan plan =
        defended ? build_adversary_plan(st, attack, rec.malicious_selected, threads)
                 : AdversaryPlan{};

    std::vector<LayeredModel> locals(rec.selected.size());
    detail::parallel_for(rec.selected.size(), threads, [&](std::size_t i) {
        const ClientState& c = st.clients[static_cast<std::size_t>(rec.selected[i])];
        locals[i] = client_round(st, c, defended, attack, plan);
    });

    if (!defended || defense.kind == DefenseKind::none) {
        st.global = fed_avg(st.global, locals, st.eta);
        st.round += 1;
        return rec;
    }

    DefenseContext ctx = base_ctx;
    ctx.seed = stream_seed(st.seed, {stream::def_noise, st.round});
    ctx.root_hp = st.train_hp;
    ctx.root_hp.rng_seed = stream_seed(st.seed, {stream::probe, st.round, 0xf17});

    const auto t0 = std::chrono::steady_clock::now();
    DefenseOutcome outcome = apply_defense(defense, rec.selected, locals, st.global, ctx);
    rec.defense_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rec.report = std::move(outcome.report);
    rec.note = outcome.note;

    switch (outcome.kind) {
        case DefenseOutcome::Kind::keep_set: {
            std::vector<LayeredModel> kept_models;
            for (std::size_t i = 0; i < rec.selected.size(); ++i) {
                if (std::binary_search(outcome.kept.begin(), outcome.kept.end(),
                                       rec.selected[i]))
                    kept_models.push_back(std::move(locals[i]));
                else
                    rec.flagged.push_back(rec.selected[i]);
            }
            if (kept_models.empty()) {
                rec.aborted = true;  // nothing survived; hold the global
                rec.note = rec.note.empty() ? "round aborted: empty keep set" : rec.note;
            } else {
                st.global = fed_avg(st.global, kept_models, st.eta);
            }
            break;
        }
        case DefenseOutcome::Kind::weights: {
            for (int id : rec.selected)
                if (outcome.weights.at(id) == 0.0) rec.flagged.push_back(id);
            st.global = std::move(*outcome.aggregate);
            break;
        }
        case DefenseOutcome::Kind::transformed:
            st.global = fed_avg(st.global, outcome.transformed, st.eta);
            break;
        case DefenseOutcome::Kind::aggregate:
            st.global = std::move(*outcome.aggregate);
            break;
    }
    st.round += 1;
    return rec;
}

}  // namespace fedsim
