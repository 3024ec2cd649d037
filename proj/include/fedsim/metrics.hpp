#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

// The six per-scope distance metrics between a submitted local model L and
// the current global model G.  A "scope" is either the whole parameter vector
// or one named layer; every metric is computed for every scope.
//
//   cos     1 - cosine similarity between flatten(L) and flatten(G)
//   eucl    Euclidean norm of flatten(L - G)
//   count   number of coordinates with L_i > G_i (strictly increased)
//   var     population variance of flatten(L)   (the local weights, not the delta)
//   min     smallest nonzero |L_i - G_i|        (absent when the delta is zero)
//   max     largest |L_i - G_i|
enum class Metric { cos = 0, eucl, count, var, min_nz, max_abs };

inline constexpr std::size_t metric_count = 6;

inline const char* metric_name(Metric m) {
    switch (m) {
        case Metric::cos: return "cos";
        case Metric::eucl: return "eucl";
        case Metric::count: return "count";
        case Metric::var: return "var";
        case Metric::min_nz: return "min";
        case Metric::max_abs: return "max";
    }
    return "?";
}

struct ScopeMetrics {
    std::array<double, metric_count> value{};
    std::array<bool, metric_count> present{};  // cos/min can be undefined

    double get(Metric m) const { return value[static_cast<std::size_t>(m)]; }
    bool has(Metric m) const { return present[static_cast<std::size_t>(m)]; }
};

struct MetricSet {
    std::vector<std::string> scopes;       // "whole", then layer names in schema order
    std::vector<ScopeMetrics> per_scope;   // parallel to scopes
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// Cosine similarity; absent when either vector has zero norm.
inline std::optional<double> cosine_similarity(const std::vector<double>& a,
                                               const std::vector<double>& b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return dot(a, b) / (na * nb);
}

namespace detail {

struct ScopeAccum {
    double dot_lg = 0, sq_l = 0, sq_g = 0;   // cosine pieces
    double sq_delta = 0;                     // eucl
    double count_pos = 0;                    // count
    double sum_l = 0;                        // var pass 1
    double sq_dev_l = 0;                     // var pass 2 (filled later)
    double min_nz = 0;                       // 0 sentinel = none seen yet
    bool min_seen = false;
    double max_abs = 0;
    std::size_t n = 0;

    ScopeMetrics finish() const {
        ScopeMetrics s;
        const double nl = std::sqrt(sq_l), ng = std::sqrt(sq_g);
        if (nl > 0.0 && ng > 0.0) {
            s.value[0] = 1.0 - dot_lg / (nl * ng);
            s.present[0] = true;
        }
        s.value[1] = std::sqrt(sq_delta);
        s.present[1] = true;
        s.value[2] = count_pos;
        s.present[2] = true;
        s.value[3] = sq_dev_l / static_cast<double>(n);  // population variance
        s.present[3] = true;
        if (min_seen) {
            s.value[4] = min_nz;
            s.present[4] = true;
        }
        s.value[5] = max_abs;
        s.present[5] = true;
        return s;
    }
};

}  // namespace detail

// Extract all six metrics for the whole model and for each layer.  Two passes:
// the variance uses explicit deviations from the scope mean rather than a
// sum-of-squares shortcut, to keep the values tight even for large models.
inline MetricSet compute_metric_set(const LayeredModel& local, const LayeredModel& global) {
    check_schema(local, global, "compute_metric_set");
    const std::size_t layers = local.layer_count();

    std::vector<detail::ScopeAccum> acc(layers + 1);  // [0] = whole
    for (std::size_t l = 0; l < layers; ++l) {
        detail::ScopeAccum& a = acc[l + 1];
        const auto& lv = local.values[l];
        const auto& gv = global.values[l];
        for (std::size_t i = 0; i < lv.size(); ++i) {
            const double x = lv[i], g = gv[i], d = x - g;
            a.dot_lg += x * g;
            a.sq_l += x * x;
            a.sq_g += g * g;
            a.sq_delta += d * d;
            if (d > 0.0) a.count_pos += 1.0;
            a.sum_l += x;
            const double ad = std::abs(d);
            if (ad > 0.0 && (!a.min_seen || ad < a.min_nz)) {
                a.min_nz = ad;
                a.min_seen = true;
            }
            if (ad > a.max_abs) a.max_abs = ad;
        }
        a.n = lv.size();

        detail::ScopeAccum& w = acc[0];
        w.dot_lg += a.dot_lg;
        w.sq_l += a.sq_l;
        w.sq_g += a.sq_g;
        w.sq_delta += a.sq_delta;
        w.count_pos += a.count_pos;
        w.sum_l += a.sum_l;
        if (a.min_seen && (!w.min_seen || a.min_nz < w.min_nz)) {
            w.min_nz = a.min_nz;
            w.min_seen = true;
        }
        w.max_abs = std::max(w.max_abs, a.max_abs);
        w.n += a.n;
    }
    if (acc[0].n == 0) throw std::invalid_argument("compute_metric_set: model has no parameters");

    // Second pass: squared deviations per scope mean.
    std::vector<double> mean(layers + 1);
    for (std::size_t s = 0; s <= layers; ++s)
        mean[s] = acc[s].sum_l / static_cast<double>(acc[s].n);
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& lv = local.values[l];
        for (double x : lv) {
            const double dl = x - mean[l + 1];
            const double dw = x - mean[0];
            acc[l + 1].sq_dev_l += dl * dl;
            acc[0].sq_dev_l += dw * dw;
        }
    }

    MetricSet out;
    out.scopes.reserve(layers + 1);
    out.per_scope.reserve(layers + 1);
    out.scopes.push_back("whole");
    out.per_scope.push_back(acc[0].finish());
    for (std::size_t l = 0; l < layers; ++l) {
        out.scopes.push_back(local.names[l]);
        out.per_scope.push_back(acc[l + 1].finish());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Differentiable whole-model metric values with analytic gradients w.r.t. the
// local parameter vector.  These back the adaptive attack objectives; count is
// deliberately missing (its gradient is zero almost everywhere) and min/max
// are handled by post-hoc clipping instead.
// ---------------------------------------------------------------------------

struct ValueGrad {
    double value = 0.0;
    std::vector<double> grad;  // d(value)/d(local_i)
};

inline ValueGrad eucl_value_grad(const std::vector<double>& local,
                                 const std::vector<double>& global) {
    ValueGrad r;
    r.grad.assign(local.size(), 0.0);
    double sq = 0.0;
    for (std::size_t i = 0; i < local.size(); ++i) {
        const double d = local[i] - global[i];
        sq += d * d;
    }
    r.value = std::sqrt(sq);
    if (r.value > 0.0)
        for (std::size_t i = 0; i < local.size(); ++i)
            r.grad[i] = (local[i] - global[i]) / r.value;
    return r;
}

inline ValueGrad cos_value_grad(const std::vector<double>& local,
                                const std::vector<double>& global) {
    ValueGrad r;
    r.grad.assign(local.size(), 0.0);
    const double nl = norm2(local), ng = norm2(global);
    if (nl == 0.0 || ng == 0.0) {
        // Metric undefined; treat as zero contribution.
        r.value = 0.0;
        return r;
    }
    const double d = dot(local, global);
    r.value = 1.0 - d / (nl * ng);
    const double inv = 1.0 / (nl * ng);
    const double proj = d / (nl * nl * nl * ng);
    for (std::size_t i = 0; i < local.size(); ++i)
        r.grad[i] = -(global[i] * inv - local[i] * proj);
    return r;
}

inline ValueGrad var_value_grad(const std::vector<double>& local) {
    ValueGrad r;
    const double n = static_cast<double>(local.size());
    double mean = 0.0;
    for (double x : local) mean += x;
    mean /= n;
    double sq = 0.0;
    for (double x : local) sq += (x - mean) * (x - mean);
    r.value = sq / n;
    r.grad.resize(local.size());
    for (std::size_t i = 0; i < local.size(); ++i)
        r.grad[i] = 2.0 * (local[i] - mean) / n;
    return r;
}

}  // namespace fedsim
