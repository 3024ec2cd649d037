#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/mesas.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/mlp.hpp"
#include "fedsim/model.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/stats.hpp"

namespace fedsim {

enum class DefenseKind {
    none,
    mesas,
    krum,
    m_krum,
    trimmed_mean,
    coord_median,
    clip,
    clip_noise,
    naive_cluster,
    fltrust,
    last_layer_cos
};

inline const char* defense_kind_name(DefenseKind k) {
    switch (k) {
        case DefenseKind::none: return "none";
        case DefenseKind::mesas: return "mesas";
        case DefenseKind::krum: return "krum";
        case DefenseKind::m_krum: return "m_krum";
        case DefenseKind::trimmed_mean: return "trimmed_mean";
        case DefenseKind::coord_median: return "coord_median";
        case DefenseKind::clip: return "clip";
        case DefenseKind::clip_noise: return "clip_noise";
        case DefenseKind::naive_cluster: return "naive_cluster";
        case DefenseKind::fltrust: return "fltrust";
        case DefenseKind::last_layer_cos: return "last_layer_cos";
    }
    return "?";
}

struct DefenseSpec {
    DefenseKind kind = DefenseKind::none;
    MesasConfig mesas;
    double krum_benign_fraction = 0.7;  // assumed benign share; f = floor((1 - this) * n)
    double m_krum_rate = 0.3;           // m = ceil(rate * n) models kept by M-Krum
    double trim_fraction = 0.05;        // per-side coordinate trim
    double noise_sigma = 0.01;          // clip_noise
    std::size_t root_samples = 100;     // fltrust server dataset size
};

inline void validate_defense_spec(const DefenseSpec& spec) {
    if (spec.kind == DefenseKind::mesas) validate_mesas_config(spec.mesas);
    if (spec.krum_benign_fraction <= 0.5 || spec.krum_benign_fraction > 1.0)
        throw std::invalid_argument("defense: krum_benign_fraction outside (0.5, 1]");
    if (spec.m_krum_rate <= 0.0 || spec.m_krum_rate > 1.0)
        throw std::invalid_argument("defense: m_krum_rate outside (0, 1]");
    if (spec.trim_fraction < 0.0 || spec.trim_fraction >= 0.5)
        throw std::invalid_argument("defense: trim_fraction outside [0, 0.5)");
    if (!(spec.noise_sigma > 0.0) && spec.kind == DefenseKind::clip_noise)
        throw std::invalid_argument("defense: noise_sigma must be positive");
    if (spec.root_samples == 0 && spec.kind == DefenseKind::fltrust)
        throw std::invalid_argument("defense: root_samples must be positive");
}

// How a defense talks to the aggregator.  Filters return a keep-set, FLTrust
// returns per-client weights plus the aggregate it already computed, robust
// aggregation rules return the aggregate directly, and clipping returns a
// transformed model list that is then averaged as usual.
struct DefenseOutcome {
    enum class Kind { keep_set, weights, transformed, aggregate } kind = Kind::keep_set;
    std::vector<int> kept;
    std::map<int, double> weights;            // fltrust: zero weight = filtered out
    std::vector<LayeredModel> transformed;    // parallel to the submitted order
    std::optional<LayeredModel> aggregate;
    std::optional<DetectionReport> report;    // mesas only
    std::string note;
};

namespace detail {

inline std::vector<std::vector<double>> flat_updates(const std::vector<LayeredModel>& locals,
                                                     const LayeredModel& global) {
    const std::vector<double> g = flatten(global);
    std::vector<std::vector<double>> u;
    u.reserve(locals.size());
    for (const auto& m : locals) {
        check_schema(m, global, "defense");
        std::vector<double> f = flatten(m);
        for (std::size_t i = 0; i < f.size(); ++i) f[i] -= g[i];
        u.push_back(std::move(f));
    }
    return u;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Krum / M-Krum.  score(i) = sum of the n - f - 2 smallest squared distances
// to the other models; the m lowest-scoring models (the most densely
// surrounded ones) are kept, ties resolved toward the lower id.
// ---------------------------------------------------------------------------

struct KrumResult {
    std::vector<int> kept;           // ids, ascending
    std::vector<double> scores;      // parallel to the submitted order
};

inline KrumResult krum_select(const std::vector<int>& ids,
                              const std::vector<LayeredModel>& locals, std::size_t f,
                              std::size_t m) {
    const std::size_t n = locals.size();
    if (n < 3) throw std::invalid_argument("krum: need at least 3 models");
    if (n < f + 3) throw std::invalid_argument("krum: population too small for f");
    if (m == 0 || m > n) throw std::invalid_argument("krum: m outside [1, n]");

    std::vector<std::vector<double>> flat;
    flat.reserve(n);
    for (const auto& l : locals) flat.push_back(flatten(l));

    std::vector<std::vector<double>> d2(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < flat[i].size(); ++k) {
                const double d = flat[i][k] - flat[j][k];
                s += d * d;
            }
            d2[i][j] = d2[j][i] = s;
        }

    KrumResult r;
    r.scores.resize(n);
    const std::size_t closest = n - f - 2;
    std::vector<double> row;
    for (std::size_t i = 0; i < n; ++i) {
        row.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) row.push_back(d2[i][j]);
        std::sort(row.begin(), row.end());
        double s = 0.0;
        for (std::size_t k = 0; k < closest; ++k) s += row[k];
        r.scores[i] = s;
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return r.scores[a] < r.scores[b]; });
    for (std::size_t k = 0; k < m; ++k) r.kept.push_back(ids[order[k]]);
    std::sort(r.kept.begin(), r.kept.end());
    return r;
}

// ---------------------------------------------------------------------------
// Coordinate-wise robust aggregation.
// ---------------------------------------------------------------------------

// Drop the floor(trim * n) smallest and largest update values per coordinate,
// average the rest, and apply to the global.
inline LayeredModel trimmed_mean_aggregate(const std::vector<LayeredModel>& locals,
                                           const LayeredModel& global, double trim) {
    const std::size_t n = locals.size();
    if (n == 0) throw std::invalid_argument("trimmed_mean: no models");
    const std::size_t k = static_cast<std::size_t>(std::floor(trim * static_cast<double>(n)));
    if (n <= 2 * k) throw std::invalid_argument("trimmed_mean: trim leaves no values");

    const auto updates = detail::flat_updates(locals, global);
    const std::size_t dim = updates.front().size();
    std::vector<double> agg(dim, 0.0);
    std::vector<double> col(n);
    for (std::size_t c = 0; c < dim; ++c) {
        for (std::size_t i = 0; i < n; ++i) col[i] = updates[i][c];
        std::sort(col.begin(), col.end());
        double s = 0.0;
        for (std::size_t i = k; i < n - k; ++i) s += col[i];
        agg[c] = s / static_cast<double>(n - 2 * k);
    }
    std::vector<double> g = flatten(global);
    for (std::size_t c = 0; c < dim; ++c) g[c] += agg[c];
    return unflatten(g, global);
}

// Coordinate-wise median (lower-middle for even counts) of the updates.
inline LayeredModel coordinate_median_aggregate(const std::vector<LayeredModel>& locals,
                                                const LayeredModel& global) {
    const std::size_t n = locals.size();
    if (n == 0) throw std::invalid_argument("coord_median: no models");
    const auto updates = detail::flat_updates(locals, global);
    const std::size_t dim = updates.front().size();
    std::vector<double> g = flatten(global);
    std::vector<double> col(n);
    for (std::size_t c = 0; c < dim; ++c) {
        for (std::size_t i = 0; i < n; ++i) col[i] = updates[i][c];
        g[c] += stats::median_lower(col);
    }
    return unflatten(g, global);
}

// ---------------------------------------------------------------------------
// Norm clipping.
// ---------------------------------------------------------------------------

// Shrink every update whose norm exceeds the median update norm down to that
// bound.  Returns the transformed model list (same order as the input).
inline std::vector<LayeredModel> clip_updates(const std::vector<LayeredModel>& locals,
                                              const LayeredModel& global) {
    if (locals.empty()) throw std::invalid_argument("clip_updates: no models");
    const auto updates = detail::flat_updates(locals, global);
    std::vector<double> norms(updates.size());
    for (std::size_t i = 0; i < updates.size(); ++i) norms[i] = norm2(updates[i]);
    const double bound = stats::median_lower(norms);

    const std::vector<double> g = flatten(global);
    std::vector<LayeredModel> out;
    out.reserve(locals.size());
    for (std::size_t i = 0; i < updates.size(); ++i) {
        const double f = norms[i] > bound && norms[i] > 0.0 ? bound / norms[i] : 1.0;
        std::vector<double> v = g;
        for (std::size_t c = 0; c < v.size(); ++c) v[c] += f * updates[i][c];
        out.push_back(unflatten(v, global));
    }
    return out;
}

// Clip, average, then blur the aggregate with Gaussian noise.
inline LayeredModel clip_and_noise_aggregate(const std::vector<LayeredModel>& locals,
                                             const LayeredModel& global, double sigma,
                                             std::uint64_t seed) {
    if (!(sigma > 0.0)) throw std::invalid_argument("clip_and_noise: sigma must be positive");
    const auto clipped = clip_updates(locals, global);
    LayeredModel agg = zeros_like(global);
    const double w = 1.0 / static_cast<double>(clipped.size());
    for (const auto& m : clipped) add_scaled(agg, m, w);
    Rng rng(stream_seed(seed, {stream::def_noise}));
    for (auto& layer : agg.values)
        for (double& x : layer) x += sigma * rng.gaussian();
    return agg;
}

// ---------------------------------------------------------------------------
// Cosine-based filters.
// ---------------------------------------------------------------------------

namespace detail {

// Cluster clients by the rows of their pairwise cosine-distance matrix and
// keep the larger cluster.  Zero-norm vectors have no cosine row and are kept
// unconditionally.  `vectors` holds one update (slice) per client.
inline std::vector<int> cosine_row_filter(const std::vector<int>& ids,
                                          const std::vector<std::vector<double>>& vectors) {
    const std::size_t n = vectors.size();
    std::vector<std::size_t> active;  // clients with a usable cosine row
    std::vector<int> kept;
    for (std::size_t i = 0; i < n; ++i) {
        if (norm2(vectors[i]) > 0.0) active.push_back(i);
        else kept.push_back(ids[i]);
    }
    if (active.size() < 2) {
        for (std::size_t i : active) kept.push_back(ids[i]);
        std::sort(kept.begin(), kept.end());
        return kept;
    }

    const std::size_t a = active.size();
    std::vector<std::vector<double>> rows(a, std::vector<double>(a, 0.0));
    for (std::size_t x = 0; x < a; ++x)
        for (std::size_t y = x + 1; y < a; ++y) {
            const auto c = cosine_similarity(vectors[active[x]], vectors[active[y]]);
            rows[x][y] = rows[y][x] = 1.0 - *c;
        }

    // Embed each client as its distance row; Euclidean distances between rows
    // feed the same average-linkage 2-clustering the statistics module uses.
    std::vector<std::vector<double>> rowdist(a, std::vector<double>(a, 0.0));
    for (std::size_t x = 0; x < a; ++x)
        for (std::size_t y = x + 1; y < a; ++y) {
            double s = 0.0;
            for (std::size_t k = 0; k < a; ++k) {
                const double d = rows[x][k] - rows[y][k];
                s += d * d;
            }
            rowdist[x][y] = rowdist[y][x] = std::sqrt(s);
        }

    const std::vector<int> labels = stats::two_clusters_from_distance(rowdist);
    std::size_t size[2] = {0, 0};
    for (int l : labels) ++size[l];
    int keep_label;
    if (size[0] != size[1]) keep_label = size[0] > size[1] ? 0 : 1;
    else keep_label = labels[0];  // tie: keep the cluster with the earliest client
    for (std::size_t x = 0; x < a; ++x)
        if (labels[x] == keep_label) kept.push_back(ids[active[x]]);
    std::sort(kept.begin(), kept.end());
    return kept;
}

}  // namespace detail

inline std::vector<int> naive_cluster_filter(const std::vector<int>& ids,
                                             const std::vector<LayeredModel>& locals,
                                             const LayeredModel& global) {
    if (locals.size() < 2) throw std::invalid_argument("naive_cluster: need at least 2 models");
    return detail::cosine_row_filter(ids, detail::flat_updates(locals, global));
}

// Same filter, restricted to the output layer (final weight + bias buffers),
// where backdoor fingerprints concentrate.
inline std::vector<int> last_layer_cosine_filter(const std::vector<int>& ids,
                                                 const std::vector<LayeredModel>& locals,
                                                 const LayeredModel& global) {
    if (locals.size() < 2) throw std::invalid_argument("last_layer_cos: need at least 2 models");
    const std::size_t layers = global.layer_count();
    if (layers < 2) throw std::invalid_argument("last_layer_cos: model has no output layer");
    std::vector<std::vector<double>> slices;
    slices.reserve(locals.size());
    for (const auto& m : locals) {
        check_schema(m, global, "last_layer_cos");
        std::vector<double> v;
        for (std::size_t l = layers - 2; l < layers; ++l)
            for (std::size_t i = 0; i < m.values[l].size(); ++i)
                v.push_back(m.values[l][i] - global.values[l][i]);
        slices.push_back(std::move(v));
    }
    return detail::cosine_row_filter(ids, slices);
}

// ---------------------------------------------------------------------------
// FLTrust.
// ---------------------------------------------------------------------------

struct FltrustResult {
    std::map<int, double> weights;  // normalized trust; zero = filtered
    LayeredModel aggregate;
    bool abstained = false;  // server update had zero norm
};

// The server trains its own model on a small clean root dataset; each client
// update is trusted by the clipped cosine to the server update, rescaled to
// the server update's norm, and the aggregate is the trust-weighted mean.
inline FltrustResult fltrust(const std::vector<int>& ids,
                             const std::vector<LayeredModel>& locals, const LayeredModel& global,
                             const MlpArchitecture& arch, const ClientDataset& root_data,
                             const TrainHyperparams& hp) {
    if (locals.empty()) throw std::invalid_argument("fltrust: no models");
    if (root_data.size() == 0) throw std::invalid_argument("fltrust: empty root dataset");

    FltrustResult r;
    const LayeredModel server_model = train_local(global, arch, root_data, hp);
    const std::vector<double> g = flatten(global);
    std::vector<double> u0 = flatten(server_model);
    for (std::size_t i = 0; i < u0.size(); ++i) u0[i] -= g[i];
    const double n0 = norm2(u0);

    if (n0 == 0.0) {
        // Nothing to compare against: fall back to plain averaging.
        r.abstained = true;
        LayeredModel agg = zeros_like(global);
        const double w = 1.0 / static_cast<double>(locals.size());
        for (const auto& m : locals) add_scaled(agg, m, w);
        r.aggregate = std::move(agg);
        for (int id : ids) r.weights[id] = w;
        return r;
    }

    const auto updates = detail::flat_updates(locals, global);
    std::vector<double> trust(locals.size(), 0.0);
    double trust_sum = 0.0;
    for (std::size_t i = 0; i < updates.size(); ++i) {
        const auto c = cosine_similarity(updates[i], u0);
        trust[i] = c && *c > 0.0 ? *c : 0.0;
        trust_sum += trust[i];
    }

    std::vector<double> agg = g;
    if (trust_sum > 0.0) {
        for (std::size_t i = 0; i < updates.size(); ++i) {
            if (trust[i] == 0.0) continue;
            const double ni = norm2(updates[i]);
            const double f = trust[i] / trust_sum * (n0 / ni);  // ni > 0 when trust > 0
            for (std::size_t c = 0; c < agg.size(); ++c) agg[c] += f * updates[i][c];
        }
    }
    r.aggregate = unflatten(agg, global);
    for (std::size_t i = 0; i < ids.size(); ++i)
        r.weights[ids[i]] = trust_sum > 0.0 ? trust[i] / trust_sum : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Dispatcher.
// ---------------------------------------------------------------------------

struct DefenseContext {
    const MlpArchitecture* arch = nullptr;     // fltrust
    const ClientDataset* root_data = nullptr;  // fltrust
    TrainHyperparams root_hp;                  // fltrust
    std::uint64_t seed = 0;                    // clip_noise draw
};

inline DefenseOutcome apply_defense(const DefenseSpec& spec, const std::vector<int>& ids,
                                    const std::vector<LayeredModel>& locals,
                                    const LayeredModel& global, const DefenseContext& ctx) {
    validate_defense_spec(spec);
    DefenseOutcome out;
    const std::size_t n = locals.size();
    switch (spec.kind) {
        case DefenseKind::none:
            out.kind = DefenseOutcome::Kind::keep_set;
            out.kept = ids;
            break;
        case DefenseKind::mesas: {
            DetectionReport rep = mesas_filter(ids, locals, global, spec.mesas);
            out.kind = DefenseOutcome::Kind::keep_set;
            out.kept = rep.kept;
            out.report = std::move(rep);
            break;
        }
        case DefenseKind::krum:
        case DefenseKind::m_krum: {
            const std::size_t f = static_cast<std::size_t>(
                std::floor((1.0 - spec.krum_benign_fraction) * static_cast<double>(n)));
            const std::size_t m =
                spec.kind == DefenseKind::krum
                    ? 1
                    : static_cast<std::size_t>(
                          std::ceil(spec.m_krum_rate * static_cast<double>(n)));
            out.kind = DefenseOutcome::Kind::keep_set;
            out.kept = krum_select(ids, locals, f, m).kept;
            break;
        }
        case DefenseKind::trimmed_mean:
            out.kind = DefenseOutcome::Kind::aggregate;
            out.aggregate = trimmed_mean_aggregate(locals, global, spec.trim_fraction);
            break;
        case DefenseKind::coord_median:
            out.kind = DefenseOutcome::Kind::aggregate;
            out.aggregate = coordinate_median_aggregate(locals, global);
            break;
        case DefenseKind::clip:
            out.kind = DefenseOutcome::Kind::transformed;
            out.transformed = clip_updates(locals, global);
            break;
        case DefenseKind::clip_noise:
            out.kind = DefenseOutcome::Kind::aggregate;
            out.aggregate = clip_and_noise_aggregate(locals, global, spec.noise_sigma, ctx.seed);
            break;
        case DefenseKind::naive_cluster:
            out.kind = DefenseOutcome::Kind::keep_set;
            out.kept = naive_cluster_filter(ids, locals, global);
            break;
        case DefenseKind::last_layer_cos:
            out.kind = DefenseOutcome::Kind::keep_set;
            out.kept = last_layer_cosine_filter(ids, locals, global);
            break;
        case DefenseKind::fltrust: {
            if (!ctx.arch || !ctx.root_data)
                throw std::invalid_argument("fltrust: missing root dataset context");
            FltrustResult r = fltrust(ids, locals, global, *ctx.arch, *ctx.root_data, ctx.root_hp);
            out.kind = DefenseOutcome::Kind::weights;
            out.weights = std::move(r.weights);
            out.aggregate = std::move(r.aggregate);
            if (r.abstained) out.note = "fltrust abstained: zero-norm server update";
            break;
        }
    }
    return out;
}

}  // namespace fedsim
