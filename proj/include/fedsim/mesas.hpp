#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/metrics.hpp"
#include "fedsim/model.hpp"
#include "fedsim/stats.hpp"

namespace fedsim {

// Defense configuration.  significance_level is the p-value threshold shared
// by all three tests; the recommended settings are 1e-4 for iid data, 1e-3
// when clients are non-iid the same way, and 0.03 when they differ from each
// other.
struct MesasConfig {
    double significance_level = 1e-4;
    std::size_t min_population = 4;  // below this no statistics are attempted
    std::size_t max_iterations = 0;  // 0 = one per submitted model
};

inline void validate_mesas_config(const MesasConfig& cfg) {
    if (!(cfg.significance_level > 0.0) || cfg.significance_level >= 1.0)
        throw std::invalid_argument("mesas: significance_level outside (0, 1)");
    if (cfg.min_population < 4)
        throw std::invalid_argument("mesas: min_population below 4 breaks the 3-sigma guard");
}

struct FiredTest {
    std::string name;  // "t", "levene", "ks"
    double p_value = 1.0;
};

struct ScanResult {
    bool significant = false;
    std::vector<FiredTest> fired;                // tests with p below the level
    std::vector<std::size_t> sigma_outlier_pos;  // positions in the scanned list
};

// One metric list -> is the population consistent?  Splits at the median and
// compares the two distance lists with t / Levene / KS, plus the 3-sigma rule
// on the raw values.  Any firing makes the scan significant.
inline ScanResult significance_scan(const std::vector<double>& values, double level) {
    ScanResult r;
    const stats::SplitLists split = stats::median_split(values);

    const stats::TestResult t = stats::t_test(split.above, split.below);
    if (t.performed && t.p_value < level) r.fired.push_back({"t", t.p_value});
    const stats::TestResult lev = stats::levene_test(split.above, split.below);
    if (lev.performed && lev.p_value < level) r.fired.push_back({"levene", lev.p_value});
    const stats::TestResult ks = stats::ks_test(split.above, split.below);
    if (ks.performed && ks.p_value < level) r.fired.push_back({"ks", ks.p_value});

    const stats::SigmaResult sig = stats::three_sigma_outliers(values);
    if (sig.performed) r.sigma_outlier_pos = sig.outliers;

    r.significant = !r.fired.empty() || !r.sigma_outlier_pos.empty();
    return r;
}

// Split a significant metric list into two clusters and name the suspects:
// the smaller cluster, or on equal sizes the one whose centroid sits farther
// from the median of all values.
inline std::vector<int> cluster_and_flag(const std::vector<double>& values,
                                         const std::vector<int>& ids) {
    if (values.size() != ids.size())
        throw std::invalid_argument("cluster_and_flag: values/ids size mismatch");
    if (values.size() < 2) throw std::invalid_argument("cluster_and_flag: need at least 2 values");

    const std::vector<int> labels = stats::agglomerative_two_clusters(values);
    double centroid[2] = {0.0, 0.0};
    std::size_t size[2] = {0, 0};
    for (std::size_t i = 0; i < values.size(); ++i) {
        centroid[labels[i]] += values[i];
        ++size[labels[i]];
    }
    centroid[0] /= static_cast<double>(size[0]);
    centroid[1] /= static_cast<double>(size[1]);

    int suspect;
    if (size[0] != size[1]) {
        suspect = size[0] < size[1] ? 0 : 1;
    } else {
        const double med = stats::median_lower(values);
        const double d0 = std::abs(centroid[0] - med), d1 = std::abs(centroid[1] - med);
        if (d0 != d1) {
            suspect = d0 > d1 ? 0 : 1;
        } else {
            // Fully symmetric; keep the cluster holding the earliest id.
            suspect = labels[0] == 0 ? 1 : 0;
        }
    }

    std::vector<int> flagged;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (labels[i] == suspect) flagged.push_back(ids[i]);
    return flagged;
}

struct Firing {
    std::size_t iteration = 0;
    Metric metric = Metric::cos;
    std::string scope;
    std::vector<FiredTest> tests;
    std::vector<int> sigma_outliers;  // ids the 3-sigma rule pointed at
    std::vector<int> flagged;         // ids pruned because of this firing
};

struct DetectionReport {
    std::size_t iterations = 0;  // pruning iterations actually executed
    std::vector<Firing> firings;
    std::vector<int> kept;
    std::vector<int> flagged;
};

// The full filter: extract the six metrics for every model (whole-model plus
// every layer as scopes), then iteratively prune.  Each iteration scans every
// (metric, scope) list over the surviving population; every significant list
// is clustered and the suspect cluster's clients are removed.  The loop ends
// when an iteration fires nothing, the population gets too small, or the
// iteration budget (one per submitted model by default) runs out.
inline DetectionReport mesas_filter(const std::vector<int>& ids,
                                    const std::vector<LayeredModel>& locals,
                                    const LayeredModel& global, const MesasConfig& cfg) {
    validate_mesas_config(cfg);
    if (ids.size() != locals.size())
        throw std::invalid_argument("mesas_filter: ids/models size mismatch");
    if (ids.empty()) throw std::invalid_argument("mesas_filter: no models submitted");

    // Metrics are fixed per model against the current global; pruning only
    // changes which rows enter the statistics.
    std::vector<MetricSet> sets;
    sets.reserve(locals.size());
    for (const auto& m : locals) sets.push_back(compute_metric_set(m, global));
    const std::vector<std::string>& scopes = sets.front().scopes;

    DetectionReport report;
    std::vector<std::size_t> surviving(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) surviving[i] = i;

    const std::size_t max_iter = cfg.max_iterations == 0 ? ids.size() : cfg.max_iterations;
    std::vector<double> values;
    std::vector<int> present_ids;

    for (std::size_t iter = 0; iter < max_iter && surviving.size() >= cfg.min_population; ++iter) {
        std::vector<int> to_flag;
        bool any = false;

        for (std::size_t s = 0; s < scopes.size(); ++s) {
            for (std::size_t mi = 0; mi < metric_count; ++mi) {
                const Metric metric = static_cast<Metric>(mi);
                values.clear();
                present_ids.clear();
                for (std::size_t pos : surviving) {
                    if (sets[pos].per_scope[s].has(metric)) {
                        values.push_back(sets[pos].per_scope[s].get(metric));
                        present_ids.push_back(ids[pos]);
                    }
                }
                if (values.size() < cfg.min_population) continue;

                const ScanResult scan = significance_scan(values, cfg.significance_level);
                if (!scan.significant) continue;
                any = true;

                Firing f;
                f.iteration = iter;
                f.metric = metric;
                f.scope = scopes[s];
                f.tests = scan.fired;
                for (std::size_t pos : scan.sigma_outlier_pos)
                    f.sigma_outliers.push_back(present_ids[pos]);
                f.flagged = cluster_and_flag(values, present_ids);
                for (int id : f.flagged) to_flag.push_back(id);
                report.firings.push_back(std::move(f));
            }
        }

        if (!any) break;
        report.iterations = iter + 1;

        std::sort(to_flag.begin(), to_flag.end());
        to_flag.erase(std::unique(to_flag.begin(), to_flag.end()), to_flag.end());
        std::vector<std::size_t> next;
        for (std::size_t pos : surviving) {
            if (std::binary_search(to_flag.begin(), to_flag.end(), ids[pos]))
                report.flagged.push_back(ids[pos]);
            else
                next.push_back(pos);
        }
        surviving.swap(next);
    }

    for (std::size_t pos : surviving) report.kept.push_back(ids[pos]);
    std::sort(report.flagged.begin(), report.flagged.end());
    return report;
}

}  // namespace fedsim
