#pragma once

// Oracle-equivalence sweeps shared by the unit suites and the acceptance
// gate.  Each returns the number of cases exercised plus the first failure,
// so callers can both assert and report.

#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/defenses.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/mlp.hpp"
#include "fedsim/stats.hpp"
#include "oracle.hpp"

namespace checks {

struct Outcome {
    bool ok = true;
    std::size_t cases = 0;
    std::string detail;

    void fail(const std::string& msg) {
        if (!ok) return;  // keep the first failure
        ok = false;
        detail = msg;
    }
};

inline bool close_abs(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// Mixed tolerance: relative above 1, absolute below.
inline bool close_mixed(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

// ---------------------------------------------------------------------------
// Statistics vs quadrature / theta-series references.
// Statistics to 1e-9, t and Levene p to 1e-6, KS p to 1e-3.
// ---------------------------------------------------------------------------

inline Outcome stats_oracle(std::size_t pairs = 200) {
    Outcome out;
    std::mt19937_64 eng(0xabcdef);
    std::uniform_int_distribution<std::size_t> size_d(3, 40);
    std::uniform_real_distribution<double> mu_d(-3.0, 3.0), sd_d(0.2, 4.0);

    for (std::size_t trial = 0; trial < pairs; ++trial) {
        std::normal_distribution<double> g1(mu_d(eng), sd_d(eng)), g2(mu_d(eng), sd_d(eng));
        std::vector<double> a(size_d(eng)), b(size_d(eng));
        for (auto& x : a) x = g1(eng);
        for (auto& x : b) x = g2(eng);
        if (trial % 5 == 0) {  // tie-heavy lists
            for (auto& x : a) x = std::round(x);
            for (auto& x : b) x = std::round(x);
        }

        std::ostringstream tag;
        tag << "pair " << trial << " (n1=" << a.size() << ", n2=" << b.size() << ")";

        const auto t = fedsim::stats::t_test(a, b);
        if (t.performed) {
            const double ref_t = oracle::t_statistic(a, b);
            const double df = static_cast<double>(a.size() + b.size()) - 2.0;
            if (!close_mixed(t.statistic, ref_t, 1e-9))
                out.fail(tag.str() + ": t statistic " + std::to_string(t.statistic) + " vs " +
                         std::to_string(ref_t));
            if (!close_abs(t.p_value, oracle::t_two_sided_p(ref_t, df), 1e-6))
                out.fail(tag.str() + ": t p " + std::to_string(t.p_value));
        }

        const auto lv = fedsim::stats::levene_test(a, b);
        if (lv.performed) {
            const double ref_w = oracle::levene_w(a, b);
            const double d2 = static_cast<double>(a.size() + b.size()) - 2.0;
            if (!close_mixed(lv.statistic, ref_w, 1e-9))
                out.fail(tag.str() + ": levene W " + std::to_string(lv.statistic) + " vs " +
                         std::to_string(ref_w));
            if (!close_abs(lv.p_value, oracle::f_upper_p(ref_w, 1.0, d2), 1e-6))
                out.fail(tag.str() + ": levene p " + std::to_string(lv.p_value));
        }

        const auto ks = fedsim::stats::ks_test(a, b);
        if (ks.performed) {
            const double ref_d = oracle::ks_distance(a, b);
            if (!close_abs(ks.statistic, ref_d, 1e-12))
                out.fail(tag.str() + ": KS D " + std::to_string(ks.statistic) + " vs " +
                         std::to_string(ref_d));
            const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size());
            const double lambda = ref_d * std::sqrt(n1 * n2 / (n1 + n2));
            if (!close_abs(ks.p_value, oracle::ks_p_theta(lambda), 1e-3))
                out.fail(tag.str() + ": KS p " + std::to_string(ks.p_value));
        }

        if (t.performed && lv.performed && ks.performed) ++out.cases;
    }
    if (out.cases < pairs - 5) out.fail("too many abstentions: " + std::to_string(out.cases));
    return out;
}

// ---------------------------------------------------------------------------
// Metric extraction vs brute-force recomputation, 1e-12 (relative above 1).
// ---------------------------------------------------------------------------

namespace detail {

inline fedsim::LayeredModel random_layers(std::mt19937_64& eng, double spread = 1.0) {
    std::uniform_int_distribution<int> nl(1, 4);
    std::uniform_int_distribution<std::size_t> dim(1, 40);
    std::normal_distribution<double> val(0.0, spread);
    fedsim::LayeredModel m;
    const int layers = nl(eng);
    for (int l = 0; l < layers; ++l) {
        m.names.push_back("p" + std::to_string(l));
        m.shapes.push_back({dim(eng)});
        std::vector<double> v(m.shapes.back()[0]);
        for (auto& x : v) x = val(eng);
        m.values.push_back(std::move(v));
    }
    return m;
}

struct BruteMetrics {
    double value[6];
    bool present[6];
};

inline BruteMetrics brute_metrics(const std::vector<double>& l, const std::vector<double>& g) {
    BruteMetrics r{};
    const std::size_t n = l.size();
    long double dot = 0.0L, nl2 = 0.0L, ng2 = 0.0L, e2 = 0.0L, sum = 0.0L;
    std::size_t count = 0;
    double min_nz = 0.0, max_abs = 0.0;
    bool have_min = false;
    for (std::size_t i = 0; i < n; ++i) {
        dot += static_cast<long double>(l[i]) * g[i];
        nl2 += static_cast<long double>(l[i]) * l[i];
        ng2 += static_cast<long double>(g[i]) * g[i];
        const double d = l[i] - g[i];
        e2 += static_cast<long double>(d) * d;
        if (l[i] > g[i]) ++count;
        sum += l[i];
        const double ad = std::abs(d);
        if (ad > 0.0 && (!have_min || ad < min_nz)) {
            min_nz = ad;
            have_min = true;
        }
        if (ad > max_abs) max_abs = ad;
    }
    const long double mean = sum / static_cast<long double>(n);
    long double var = 0.0L;
    for (std::size_t i = 0; i < n; ++i)
        var += (static_cast<long double>(l[i]) - mean) * (static_cast<long double>(l[i]) - mean);
    var /= static_cast<long double>(n);

    r.present[0] = nl2 > 0.0L && ng2 > 0.0L;
    if (r.present[0])
        r.value[0] = static_cast<double>(1.0L - dot / (sqrtl(nl2) * sqrtl(ng2)));
    r.present[1] = true;
    r.value[1] = static_cast<double>(sqrtl(e2));
    r.present[2] = true;
    r.value[2] = static_cast<double>(count);
    r.present[3] = true;
    r.value[3] = static_cast<double>(var);
    r.present[4] = have_min;
    r.value[4] = min_nz;
    r.present[5] = true;
    r.value[5] = max_abs;
    return r;
}

}  // namespace detail

inline Outcome metric_oracle(std::size_t pairs = 100) {
    Outcome out;
    std::mt19937_64 eng(0x5eed);
    for (std::size_t trial = 0; trial < pairs; ++trial) {
        fedsim::LayeredModel global = detail::random_layers(eng);
        fedsim::LayeredModel local = global;
        std::normal_distribution<double> delta(0.0, 0.5);
        for (auto& layer : local.values)
            for (auto& x : layer) x += delta(eng);
        if (trial % 7 == 0) local.values.front() = global.values.front();  // a zero-delta layer
        if (trial % 11 == 0)  // a constant layer (zero variance)
            for (auto& x : local.values.back()) x = 1.5;

        const fedsim::MetricSet ms = fedsim::compute_metric_set(local, global);
        if (ms.scopes.size() != local.layer_count() + 1 || ms.scopes.front() != "whole") {
            out.fail("trial " + std::to_string(trial) + ": bad scope list");
            continue;
        }

        for (std::size_t s = 0; s < ms.scopes.size(); ++s) {
            std::vector<double> lv, gv;
            if (s == 0) {
                lv = fedsim::flatten(local);
                gv = fedsim::flatten(global);
            } else {
                lv = local.values[s - 1];
                gv = global.values[s - 1];
            }
            const auto ref = detail::brute_metrics(lv, gv);
            for (std::size_t m = 0; m < fedsim::metric_count; ++m) {
                if (ms.per_scope[s].present[m] != ref.present[m]) {
                    out.fail("trial " + std::to_string(trial) + " scope " + ms.scopes[s] +
                             " metric " + fedsim::metric_name(static_cast<fedsim::Metric>(m)) +
                             ": presence mismatch");
                    continue;
                }
                if (ref.present[m] && !close_mixed(ms.per_scope[s].value[m], ref.value[m], 1e-12))
                    out.fail("trial " + std::to_string(trial) + " scope " + ms.scopes[s] +
                             " metric " + fedsim::metric_name(static_cast<fedsim::Metric>(m)) +
                             ": " + std::to_string(ms.per_scope[s].value[m]) + " vs " +
                             std::to_string(ref.value[m]));
            }
        }
        ++out.cases;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Krum / trimmed mean / coordinate median vs naive recomputation (exact).
// ---------------------------------------------------------------------------

inline Outcome aggregator_oracle(std::size_t cases = 100) {
    Outcome out;
    std::mt19937_64 eng(0xa99);
    std::uniform_int_distribution<std::size_t> n_d(4, 10), dim_d(2, 20);
    std::normal_distribution<double> val(0.0, 1.0);

    for (std::size_t trial = 0; trial < cases; ++trial) {
        const std::size_t n = n_d(eng), dim = dim_d(eng);
        fedsim::LayeredModel global;
        global.names = {"w"};
        global.shapes = {{dim}};
        global.values = {std::vector<double>(dim)};
        for (auto& x : global.values[0]) x = val(eng);

        std::vector<fedsim::LayeredModel> locals(n, global);
        std::vector<std::vector<double>> updates(n, std::vector<double>(dim));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dim; ++c) {
                updates[i][c] = val(eng);
                locals[i].values[0][c] += updates[i][c];
            }
        std::vector<int> ids(n);
        for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(i);

        // The update a robust rule actually sees is the floating-point
        // difference local - global, not the draw that built the local
        // (fl(g + u) - g rounds away from u).  Bitwise comparison requires
        // the reference to start from the same numbers.
        std::vector<std::vector<double>> recovered(n, std::vector<double>(dim));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dim; ++c)
                recovered[i][c] = locals[i].values[0][c] - global.values[0][c];

        // Krum: pairwise squared distances, score = sum of the n-f-2 smallest.
        std::uniform_int_distribution<std::size_t> f_d(0, n - 3);
        const std::size_t f = f_d(eng);
        std::vector<double> ref_scores(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> d2;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                double s = 0.0;
                for (std::size_t c = 0; c < dim; ++c) {
                    const double d = locals[i].values[0][c] - locals[j].values[0][c];
                    s += d * d;
                }
                d2.push_back(s);
            }
            std::sort(d2.begin(), d2.end());
            double score = 0.0;
            for (std::size_t k = 0; k < n - f - 2; ++k) score += d2[k];
            ref_scores[i] = score;
        }
        const std::size_t m = (trial % 2 == 0)
                                  ? 1
                                  : static_cast<std::size_t>(
                                        std::ceil(0.3 * static_cast<double>(n)));
        // m lowest scores, score ties to the lowest id: a stable sort over
        // (score, id) gives the reference keep set.
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            return ref_scores[x] != ref_scores[y] ? ref_scores[x] < ref_scores[y] : x < y;
        });
        std::vector<int> ref_kept;
        for (std::size_t k = 0; k < m; ++k) ref_kept.push_back(static_cast<int>(order[k]));
        std::sort(ref_kept.begin(), ref_kept.end());

        const auto kr = fedsim::krum_select(ids, locals, f, m);
        if (kr.kept != ref_kept) out.fail("trial " + std::to_string(trial) + ": krum keep set");
        for (std::size_t i = 0; i < n; ++i)
            if (kr.scores[i] != ref_scores[i])
                out.fail("trial " + std::to_string(trial) + ": krum score " + std::to_string(i));

        // Trimmed mean, floor(trim*n) per side.
        const double trim = 0.1;
        const std::size_t k = static_cast<std::size_t>(std::floor(trim * static_cast<double>(n)));
        const fedsim::LayeredModel tm = fedsim::trimmed_mean_aggregate(locals, global, trim);
        for (std::size_t c = 0; c < dim; ++c) {
            std::vector<double> col;
            for (std::size_t i = 0; i < n; ++i) col.push_back(recovered[i][c]);
            std::sort(col.begin(), col.end());
            double s = 0.0;
            for (std::size_t i = k; i < n - k; ++i) s += col[i];
            const double want = global.values[0][c] + s / static_cast<double>(n - 2 * k);
            if (tm.values[0][c] != want)
                out.fail("trial " + std::to_string(trial) + ": trimmed mean coord " +
                         std::to_string(c));
        }

        // Coordinate median (lower-middle).
        const fedsim::LayeredModel md = fedsim::coordinate_median_aggregate(locals, global);
        for (std::size_t c = 0; c < dim; ++c) {
            std::vector<double> col;
            for (std::size_t i = 0; i < n; ++i) col.push_back(recovered[i][c]);
            std::sort(col.begin(), col.end());
            const double want = global.values[0][c] + col[(n - 1) / 2];
            if (md.values[0][c] != want)
                out.fail("trial " + std::to_string(trial) + ": median coord " +
                         std::to_string(c));
        }
        ++out.cases;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Analytic gradients vs central finite differences, 1e-4 (relative above 1).
// Covers the network loss gradient and the three trainable metric gradients.
// ---------------------------------------------------------------------------

inline Outcome gradient_check(std::size_t cases = 100) {
    Outcome out;
    std::mt19937_64 eng(0x96ad);
    std::uniform_int_distribution<std::size_t> in_d(2, 6), hid_d(2, 8), cls_d(2, 5),
        rows_d(3, 8);
    std::normal_distribution<double> val(0.0, 0.8);
    const double h = 1e-5;

    for (std::size_t trial = 0; trial < cases; ++trial) {
        fedsim::MlpArchitecture arch;
        arch.input_dim = in_d(eng);
        arch.hidden_dims = {hid_d(eng)};
        if (trial % 3 == 0) arch.hidden_dims.push_back(hid_d(eng));
        arch.class_count = static_cast<int>(cls_d(eng));

        fedsim::LayeredModel model = fedsim::init_model(arch, trial + 1);
        for (auto& layer : model.values)
            for (auto& x : layer) x += 0.3 * val(eng);  // break symmetry, wake biases

        fedsim::ClientDataset batch;
        batch.feature_dim = arch.input_dim;
        const std::size_t rows = rows_d(eng);
        std::uniform_int_distribution<int> lab(0, arch.class_count - 1);
        for (std::size_t i = 0; i < rows; ++i) {
            std::vector<double> x(arch.input_dim);
            for (auto& v : x) v = val(eng);
            batch.append_row(x.data(), lab(eng));
        }
        std::vector<std::size_t> idx(rows);
        for (std::size_t i = 0; i < rows; ++i) idx[i] = i;

        fedsim::LayeredModel grad = fedsim::zeros_like(model);
        fedsim::backward(model, arch, batch, idx, grad);

        std::vector<double> flat = fedsim::flatten(model);
        const std::vector<double> gflat = fedsim::flatten(grad);
        for (std::size_t p = 0; p < flat.size(); ++p) {
            const double keep = flat[p];
            flat[p] = keep + h;
            const double up =
                fedsim::forward_loss(fedsim::unflatten(flat, model), arch, batch, idx).loss;
            flat[p] = keep - h;
            const double dn =
                fedsim::forward_loss(fedsim::unflatten(flat, model), arch, batch, idx).loss;
            flat[p] = keep;
            const double fd = (up - dn) / (2.0 * h);
            if (!close_mixed(fd, gflat[p], 1e-4)) {
                out.fail("trial " + std::to_string(trial) + ": network grad param " +
                         std::to_string(p) + " fd=" + std::to_string(fd) + " an=" +
                         std::to_string(gflat[p]));
                break;
            }
        }

        // Metric gradients on the flattened model against a fixed reference.
        std::vector<double> ref = flat;
        for (auto& x : ref) x += 0.2 * val(eng);
        struct Case {
            fedsim::ValueGrad vg;
            const char* name;
        };
        const Case metric_cases[] = {
            {fedsim::eucl_value_grad(flat, ref), "eucl"},
            {fedsim::cos_value_grad(flat, ref), "cos"},
            {fedsim::var_value_grad(flat), "var"},
        };
        for (const Case& mc : metric_cases) {
            for (std::size_t p = 0; p < flat.size(); p += 7) {  // sample coordinates
                const double keep = flat[p];
                auto eval = [&](double v) {
                    flat[p] = v;
                    double r = 0.0;
                    if (mc.name[0] == 'e') r = fedsim::eucl_value_grad(flat, ref).value;
                    else if (mc.name[0] == 'c') r = fedsim::cos_value_grad(flat, ref).value;
                    else r = fedsim::var_value_grad(flat).value;
                    flat[p] = keep;
                    return r;
                };
                const double fd = (eval(keep + h) - eval(keep - h)) / (2.0 * h);
                if (!close_mixed(fd, mc.vg.grad[p], 1e-4)) {
                    out.fail("trial " + std::to_string(trial) + ": " + mc.name +
                             " grad param " + std::to_string(p));
                    break;
                }
            }
        }
        ++out.cases;
    }
    return out;
}

}  // namespace checks
