#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/rng.hpp"

namespace fedsim {

// Row-major sample store.  poisoned_idx records which rows were altered by a
// poisoning step; origin_client is -1 for pools that don't belong to a client.
struct ClientDataset {
    std::size_t feature_dim = 0;
    std::vector<double> features;  // size() * feature_dim
    std::vector<int> labels;
    std::vector<std::size_t> poisoned_idx;
    int origin_client = -1;

    std::size_t size() const { return labels.size(); }

    const double* row(std::size_t i) const { return features.data() + i * feature_dim; }
    double* row(std::size_t i) { return features.data() + i * feature_dim; }

    void append_row(const double* src, int label) {
        features.insert(features.end(), src, src + feature_dim);
        labels.push_back(label);
    }
};

// ---------------------------------------------------------------------------
// Synthetic data: Gaussian blobs, one mean per class.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int class_count = 4;
    std::size_t feature_dim = 16;
    std::size_t per_class = 400;
    double spread = 0.25;  // isotropic stddev around the class mean
};

// Class means depend only on (spec, seed): uniform in [-1, 1]^d.  Separate
// draws (train pool, test pool) share the same blob layout.
inline std::vector<std::vector<double>> blob_means(const SyntheticSpec& spec, std::uint64_t seed) {
    Rng rng(stream_seed(seed, {stream::data_gen, 0}));
    std::vector<std::vector<double>> means(static_cast<std::size_t>(spec.class_count));
    for (auto& m : means) {
        m.resize(spec.feature_dim);
        for (double& x : m) x = rng.uniform(-1.0, 1.0);
    }
    return means;
}

// Balanced pool: per_class samples for each class, class-major order.
// draw_tag picks the sample substream so a test pool can be drawn disjoint
// from the training pool while reusing the same means.
inline ClientDataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed,
                                   std::uint64_t draw_tag = 0) {
    if (spec.class_count < 2) throw std::invalid_argument("gen_synthetic: need at least 2 classes");
    if (spec.feature_dim == 0 || spec.per_class == 0)
        throw std::invalid_argument("gen_synthetic: empty dimensions");
    if (!(spec.spread > 0.0)) throw std::invalid_argument("gen_synthetic: spread must be positive");

    const auto means = blob_means(spec, seed);
    Rng rng(stream_seed(seed, {stream::data_gen, 1 + draw_tag}));

    ClientDataset out;
    out.feature_dim = spec.feature_dim;
    out.features.reserve(spec.per_class * means.size() * spec.feature_dim);
    for (int c = 0; c < spec.class_count; ++c) {
        for (std::size_t s = 0; s < spec.per_class; ++s) {
            for (std::size_t d = 0; d < spec.feature_dim; ++d)
                out.features.push_back(means[static_cast<std::size_t>(c)][d] +
                                       spec.spread * rng.gaussian());
            out.labels.push_back(c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Partitioning.
// ---------------------------------------------------------------------------

enum class PartitionStrategy { iid, one_class, two_class, dirichlet, normal, random_gen };

inline const char* partition_strategy_name(PartitionStrategy s) {
    switch (s) {
        case PartitionStrategy::iid: return "iid";
        case PartitionStrategy::one_class: return "one_class";
        case PartitionStrategy::two_class: return "two_class";
        case PartitionStrategy::dirichlet: return "dirichlet";
        case PartitionStrategy::normal: return "normal";
        case PartitionStrategy::random_gen: return "random_gen";
    }
    return "?";
}

struct PartitionSpec {
    PartitionStrategy strategy = PartitionStrategy::iid;
    double gamma = 0.0;          // one_class / two_class: fraction shifted to main label(s)
    double concentration = 1.0;  // dirichlet
    std::size_t samples_per_client = 128;
};

struct Partition {
    std::vector<ClientDataset> clients;
    bool replacement_fallback = false;  // a class pool ran dry and was reused
};

namespace detail {

// Turn non-negative frequencies into integer counts summing to total:
// floor allocation, then largest fractional remainders (ties to the lowest
// class index) absorb what is left.
inline std::vector<std::size_t> counts_from_frequencies(const std::vector<double>& freq,
                                                        std::size_t total) {
    const std::size_t c = freq.size();
    double sum = 0.0;
    for (double f : freq) sum += f;
    if (sum <= 0.0) throw std::invalid_argument("counts_from_frequencies: zero frequency mass");

    std::vector<std::size_t> counts(c);
    std::vector<std::pair<double, std::size_t>> rem(c);  // (-frac, idx) for stable sort
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < c; ++i) {
        const double exact = freq[i] / sum * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        rem[i] = {-(exact - std::floor(exact)), i};
    }
    std::sort(rem.begin(), rem.end());
    for (std::size_t k = 0; assigned < total; ++k, ++assigned) counts[rem[k % c].second] += 1;
    return counts;
}

// Marsaglia-Tsang gamma sampler (shape alpha, scale 1).
inline double sample_gamma(Rng& rng, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("sample_gamma: alpha must be positive");
    if (alpha < 1.0) {
        double u;
        do { u = rng.uniform(); } while (u <= 0.0);
        return sample_gamma(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        const double x = rng.gaussian();
        const double t = 1.0 + c * x;
        if (t <= 0.0) continue;
        const double v = t * t * t;
        double u;
        do { u = rng.uniform(); } while (u <= 0.0);
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

}  // namespace detail

// Per-client class frequencies for one client under a strategy.  Exposed for
// tests; partition() integerizes and samples from the pool.
inline std::vector<double> client_class_frequencies(const PartitionSpec& spec, int client_id,
                                                    int class_count, Rng& rng) {
    const std::size_t c = static_cast<std::size_t>(class_count);
    const std::size_t main_label = static_cast<std::size_t>(client_id % class_count);
    std::vector<double> freq(c, 0.0);

    switch (spec.strategy) {
        case PartitionStrategy::iid:
            std::fill(freq.begin(), freq.end(), 1.0 / static_cast<double>(c));
            break;
        case PartitionStrategy::one_class: {
            // Every class starts at 1/C; a gamma fraction of each class's mass
            // moves to the main label.  gamma = 0 is exactly iid, gamma = 1
            // leaves only the main label.
            const double g = spec.gamma;
            const double base = (1.0 - g) / static_cast<double>(c);
            std::fill(freq.begin(), freq.end(), base);
            freq[main_label] += g;
            break;
        }
        case PartitionStrategy::two_class: {
            const double g = spec.gamma;
            const double base = (1.0 - g) / static_cast<double>(c);
            std::fill(freq.begin(), freq.end(), base);
            freq[main_label] += 0.5 * g;
            freq[(main_label + 1) % c] += 0.5 * g;
            break;
        }
        case PartitionStrategy::dirichlet: {
            double sum = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                freq[i] = detail::sample_gamma(rng, spec.concentration);
                sum += freq[i];
            }
            for (double& f : freq) f /= sum;
            // The largest draw belongs to the main label.
            const std::size_t arg =
                static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
            std::swap(freq[arg], freq[main_label]);
            break;
        }
        case PartitionStrategy::normal: {
            double sum = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                freq[i] = std::abs(rng.gaussian());
                sum += freq[i];
            }
            if (sum <= 0.0) { std::fill(freq.begin(), freq.end(), 1.0); sum = static_cast<double>(c); }
            for (double& f : freq) f /= sum;
            const std::size_t arg =
                static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
            std::swap(freq[arg], freq[main_label]);
            break;
        }
        case PartitionStrategy::random_gen: {
            // Coin-flip label membership (redrawn until at least one label is
            // in), then uniform weights over the included labels.
            std::vector<bool> in(c, false);
            bool any = false;
            while (!any)
                for (std::size_t i = 0; i < c; ++i) {
                    in[i] = rng.uniform() < 0.5;
                    any = any || in[i];
                }
            double sum = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                if (!in[i]) continue;
                double w;
                do { w = rng.uniform(); } while (w <= 0.0);
                freq[i] = w;
                sum += w;
            }
            for (double& f : freq) f /= sum;
            break;
        }
    }
    return freq;
}

// Split a balanced pool across clients.  Each client receives exactly
// samples_per_client rows, drawn without replacement from per-class pools;
// when a pool runs dry the draw falls back to with-replacement and the result
// says so.
inline Partition partition(const ClientDataset& pool, const PartitionSpec& spec, int client_count,
                           int class_count, std::uint64_t seed) {
    if (client_count < 1) throw std::invalid_argument("partition: need at least one client");
    if (class_count < 2) throw std::invalid_argument("partition: need at least two classes");
    if (spec.samples_per_client == 0)
        throw std::invalid_argument("partition: samples_per_client must be positive");
    if (spec.gamma < 0.0 || spec.gamma > 1.0)
        throw std::invalid_argument("partition: gamma outside [0, 1]");
    if (spec.strategy == PartitionStrategy::dirichlet && !(spec.concentration > 0.0))
        throw std::invalid_argument("partition: concentration must be positive");

    // Per-class index pools, shuffled once.
    std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(class_count));
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const int lab = pool.labels[i];
        if (lab < 0 || lab >= class_count)
            throw std::invalid_argument("partition: pool label outside class range");
        pools[static_cast<std::size_t>(lab)].push_back(i);
    }
    Rng shuffle_rng(stream_seed(seed, {stream::partition, 0}));
    for (auto& p : pools) shuffle_rng.shuffle(p);
    std::vector<std::size_t> cursor(pools.size(), 0);

    Partition out;
    out.clients.reserve(static_cast<std::size_t>(client_count));
    Rng freq_rng(stream_seed(seed, {stream::partition, 1}));
    Rng fallback_rng(stream_seed(seed, {stream::partition, 2}));

    for (int cid = 0; cid < client_count; ++cid) {
        const auto freq = client_class_frequencies(spec, cid, class_count, freq_rng);
        const auto counts = detail::counts_from_frequencies(freq, spec.samples_per_client);

        ClientDataset ds;
        ds.feature_dim = pool.feature_dim;
        ds.origin_client = cid;
        for (std::size_t c = 0; c < counts.size(); ++c) {
            for (std::size_t k = 0; k < counts[c]; ++k) {
                std::size_t src;
                if (cursor[c] < pools[c].size()) {
                    src = pools[c][cursor[c]++];
                } else {
                    if (pools[c].empty())
                        throw std::runtime_error("partition: pool has no samples for a class");
                    src = pools[c][fallback_rng.uniform_int(pools[c].size())];
                    out.replacement_fallback = true;
                }
                ds.append_row(pool.row(src), pool.labels[src]);
            }
        }
        out.clients.push_back(std::move(ds));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Poisoning.
// ---------------------------------------------------------------------------

enum class PoisonKind { none, pixel_trigger, clean_label, label_flip, random_flip };

inline const char* poison_kind_name(PoisonKind k) {
    switch (k) {
        case PoisonKind::none: return "none";
        case PoisonKind::pixel_trigger: return "pixel_trigger";
        case PoisonKind::clean_label: return "clean_label";
        case PoisonKind::label_flip: return "label_flip";
        case PoisonKind::random_flip: return "random_flip";
    }
    return "?";
}

struct PoisonSpec {
    PoisonKind kind = PoisonKind::none;
    double pdr = 0.1;  // poisoned data rate within the affected sample set
    int target_label = 0;
    int source_label = -1;  // label_flip only
    int class_count = 0;    // random_flip redraw range
    // Trigger geometry: the first ceil(feature_dim * trigger_fraction)
    // features are overwritten with trigger_value (NaN = the maximum feature
    // value observed in the dataset being poisoned).
    double trigger_fraction = 1.0 / 16.0;
    double trigger_value = std::numeric_limits<double>::quiet_NaN();
};

struct PoisonOutcome {
    ClientDataset dataset;
    bool no_source_warning = false;  // label_flip found nothing to flip
};

namespace detail {

inline std::size_t trigger_width(std::size_t feature_dim, double fraction) {
    const std::size_t w =
        static_cast<std::size_t>(std::ceil(static_cast<double>(feature_dim) * fraction));
    return std::max<std::size_t>(1, std::min(w, feature_dim));
}

inline double observed_max(const ClientDataset& ds) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : ds.features) m = std::max(m, x);
    return m;
}

inline void stamp_trigger(ClientDataset& ds, std::size_t row, std::size_t width, double value) {
    double* r = ds.row(row);
    for (std::size_t d = 0; d < width; ++d) r[d] = value;
}

// k = ceil(pdr * n) distinct indices, drawn without replacement.
inline std::vector<std::size_t> pick_rows(std::size_t n, double pdr, Rng& rng) {
    const std::size_t k =
        std::min(n, static_cast<std::size_t>(std::ceil(pdr * static_cast<double>(n))));
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace detail

inline PoisonOutcome poison_dataset(const ClientDataset& input, const PoisonSpec& spec,
                                    std::uint64_t seed) {
    if (spec.kind != PoisonKind::none && (spec.pdr <= 0.0 || spec.pdr > 1.0))
        throw std::invalid_argument("poison_dataset: pdr outside (0, 1]");
    PoisonOutcome out;
    out.dataset = input;
    out.dataset.poisoned_idx.clear();
    if (spec.kind == PoisonKind::none || input.size() == 0) return out;

    Rng rng(stream_seed(seed, {stream::poison}));
    ClientDataset& ds = out.dataset;
    const std::size_t width = detail::trigger_width(ds.feature_dim, spec.trigger_fraction);
    const double trig = std::isnan(spec.trigger_value) ? detail::observed_max(ds)
                                                       : spec.trigger_value;

    switch (spec.kind) {
        case PoisonKind::pixel_trigger: {
            for (std::size_t i : detail::pick_rows(ds.size(), spec.pdr, rng)) {
                detail::stamp_trigger(ds, i, width, trig);
                ds.labels[i] = spec.target_label;
                ds.poisoned_idx.push_back(i);
            }
            break;
        }
        case PoisonKind::clean_label: {
            // Trigger only samples that already carry the target label; their
            // labels stay put.
            std::vector<std::size_t> candidates;
            for (std::size_t i = 0; i < ds.size(); ++i)
                if (ds.labels[i] == spec.target_label) candidates.push_back(i);
            if (candidates.empty()) return out;
            const auto chosen = detail::pick_rows(candidates.size(), spec.pdr, rng);
            for (std::size_t c : chosen) {
                detail::stamp_trigger(ds, candidates[c], width, trig);
                ds.poisoned_idx.push_back(candidates[c]);
            }
            break;
        }
        case PoisonKind::label_flip: {
            if (spec.source_label < 0)
                throw std::invalid_argument("poison_dataset: label_flip needs source_label");
            for (std::size_t i = 0; i < ds.size(); ++i) {
                if (ds.labels[i] == spec.source_label) {
                    ds.labels[i] = spec.target_label;
                    ds.poisoned_idx.push_back(i);
                }
            }
            out.no_source_warning = ds.poisoned_idx.empty();
            break;
        }
        case PoisonKind::random_flip: {
            if (spec.class_count < 2)
                throw std::invalid_argument("poison_dataset: random_flip needs class_count");
            for (std::size_t i : detail::pick_rows(ds.size(), spec.pdr, rng)) {
                // Uniform over the other classes.
                const int shift =
                    1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.class_count - 1)));
                ds.labels[i] = (ds.labels[i] + shift) % spec.class_count;
                ds.poisoned_idx.push_back(i);
            }
            break;
        }
        case PoisonKind::none: break;
    }
    return out;
}

// Clean and attack-success evaluation sets.  The triggered set holds the
// samples on which the backdoor is judged, relabeled to the attacker's
// target; it is empty for untargeted or absent attacks.
inline std::pair<ClientDataset, ClientDataset> build_test_sets(const ClientDataset& base,
                                                               const PoisonSpec& spec) {
    ClientDataset triggered;
    triggered.feature_dim = base.feature_dim;

    switch (spec.kind) {
        case PoisonKind::pixel_trigger:
        case PoisonKind::clean_label: {
            const std::size_t width = detail::trigger_width(base.feature_dim, spec.trigger_fraction);
            const double trig = std::isnan(spec.trigger_value) ? detail::observed_max(base)
                                                               : spec.trigger_value;
            for (std::size_t i = 0; i < base.size(); ++i) {
                if (base.labels[i] == spec.target_label) continue;  // already the target
                triggered.append_row(base.row(i), spec.target_label);
                detail::stamp_trigger(triggered, triggered.size() - 1, width, trig);
            }
            break;
        }
        case PoisonKind::label_flip: {
            if (spec.source_label < 0)
                throw std::invalid_argument("build_test_sets: label_flip needs source_label");
            for (std::size_t i = 0; i < base.size(); ++i)
                if (base.labels[i] == spec.source_label)
                    triggered.append_row(base.row(i), spec.target_label);
            break;
        }
        case PoisonKind::random_flip:
        case PoisonKind::none:
            break;  // untargeted: no backdoor set
    }
    return {base, triggered};
}

// ---------------------------------------------------------------------------
// CSV dump/load for external inspection.  Header:
//   client_id,label,poisoned,f0,f1,...
// ---------------------------------------------------------------------------

inline void dump_csv(const std::vector<ClientDataset>& clients, std::ostream& os) {
    if (clients.empty()) throw std::invalid_argument("dump_csv: no clients");
    const std::size_t dim = clients.front().feature_dim;
    os << "client_id,label,poisoned";
    for (std::size_t d = 0; d < dim; ++d) os << ",f" << d;
    os << "\n";
    os.precision(17);
    for (const auto& c : clients) {
        if (c.feature_dim != dim) throw std::invalid_argument("dump_csv: mixed feature dims");
        for (std::size_t i = 0; i < c.size(); ++i) {
            const bool poisoned =
                std::binary_search(c.poisoned_idx.begin(), c.poisoned_idx.end(), i);
            os << c.origin_client << ',' << c.labels[i] << ',' << (poisoned ? 1 : 0);
            const double* r = c.row(i);
            for (std::size_t d = 0; d < dim; ++d) os << ',' << r[d];
            os << "\n";
        }
    }
}

inline std::vector<ClientDataset> load_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("load_csv: empty input");
    std::size_t dim = 0;
    {
        std::stringstream hs(line);
        std::string col;
        std::size_t ncol = 0;
        while (std::getline(hs, col, ',')) ++ncol;
        if (ncol < 4) throw std::runtime_error("load_csv: malformed header");
        dim = ncol - 3;
    }
    std::vector<ClientDataset> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string cell;
        auto next = [&]() {
            if (!std::getline(ls, cell, ','))
                throw std::runtime_error("load_csv: truncated row");
            return cell;
        };
        const int cid = std::stoi(next());
        const int label = std::stoi(next());
        const int poisoned = std::stoi(next());
        if (out.empty() || out.back().origin_client != cid) {
            ClientDataset ds;
            ds.feature_dim = dim;
            ds.origin_client = cid;
            out.push_back(std::move(ds));
        }
        ClientDataset& ds = out.back();
        for (std::size_t d = 0; d < dim; ++d) ds.features.push_back(std::stod(next()));
        ds.labels.push_back(label);
        if (poisoned) ds.poisoned_idx.push_back(ds.size() - 1);
    }
    return out;
}

}  // namespace fedsim
