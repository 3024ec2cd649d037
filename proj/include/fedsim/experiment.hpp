#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/federation.hpp"
#include "fedsim/version.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Detection bookkeeping.  A "positive" is a model the defense filtered out;
// ground truth is whether its client attacked that round.  Rates keep their
// usual definitions and go absent when the denominator is empty.
// ---------------------------------------------------------------------------

struct DetectionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }

    std::optional<double> accuracy() const {
        if (total() == 0) return std::nullopt;
        return static_cast<double>(tp + tn) / static_cast<double>(total());
    }
    std::optional<double> fpr() const {
        if (fp + tn == 0) return std::nullopt;
        return static_cast<double>(fp) / static_cast<double>(fp + tn);
    }
    std::optional<double> fnr() const {
        if (fn + tp == 0) return std::nullopt;
        return static_cast<double>(fn) / static_cast<double>(fn + tp);
    }

    DetectionCounts& operator+=(const DetectionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const DetectionCounts& a, const DetectionCounts& b) {
        return a.tp == b.tp && a.fp == b.fp && a.tn == b.tn && a.fn == b.fn;
    }
};

// All three id lists must be sorted ascending.
inline DetectionCounts detection_counts(const std::vector<int>& flagged,
                                        const std::vector<int>& malicious,
                                        const std::vector<int>& selected) {
    DetectionCounts c;
    for (int id : selected) {
        const bool bad = std::binary_search(malicious.begin(), malicious.end(), id);
        const bool hit = std::binary_search(flagged.begin(), flagged.end(), id);
        if (bad && hit) ++c.tp;
        else if (bad) ++c.fn;
        else if (hit) ++c.fp;
        else ++c.tn;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Evaluation: main-task accuracy on the clean test set, backdoor accuracy on
// the triggered set (absent when the attack defines no backdoor).
// ---------------------------------------------------------------------------

struct EvalResult {
    double ma = 0.0;
    std::optional<double> ba;
};

inline EvalResult evaluate_model(const LayeredModel& model, const MlpArchitecture& arch,
                                 const ClientDataset& clean, const ClientDataset& triggered) {
    EvalResult r;
    r.ma = accuracy(model, arch, clean);
    if (triggered.size() > 0) r.ba = accuracy(model, arch, triggered);
    return r;
}

// ---------------------------------------------------------------------------
// Experiment = warmup rounds (benign, undefended) followed by attack rounds
// (adversary live, defense live), evaluated after every aggregation.
// ---------------------------------------------------------------------------

struct RoundStats {
    RoundRecord rec;
    bool defended = false;
    double ma = 0.0;
    std::optional<double> ba;
    DetectionCounts det;  // empty vs-truth table in undefended rounds
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<RoundStats> rounds;
    double final_ma = 0.0;
    std::optional<double> final_ba;
    DetectionCounts detection;  // summed over defended rounds
    bool attack_effective = false;
    std::vector<std::string> warnings;
    double total_ms = 0.0;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::size_t threads = 1) {
    const auto t_start = std::chrono::steady_clock::now();
    ExperimentResult out;
    out.config = cfg;

    const MlpArchitecture arch = cfg.architecture();
    validate_architecture(arch);
    validate_hyperparams(cfg.train);
    validate_defense_spec(cfg.defense);
    if (cfg.attack.adaptive) {
        AdaptiveSpec probe_free = *cfg.attack.adaptive;
        probe_free.targets.assign(probe_free.objectives.size(), 0.0);
        validate_adaptive_spec(probe_free);
    }

    // Data: one shared train pool partitioned across clients, one held-out
    // test pool drawn from the same class blobs.
    const ClientDataset train_pool = gen_synthetic(cfg.data, cfg.seed, 0);
    SyntheticSpec test_spec = cfg.data;
    test_spec.per_class = cfg.test_per_class;
    const ClientDataset test_pool = gen_synthetic(test_spec, cfg.seed, 1);
    const auto [clean_test, triggered_test] = build_test_sets(test_pool, cfg.attack.poison);

    Partition part = partition(train_pool, cfg.partition, cfg.clients, cfg.data.class_count,
                               cfg.seed);
    if (part.replacement_fallback)
        out.warnings.push_back("partition: class pools exhausted, sampled with replacement");

    // Clients.  The adversary controls the lowest ids; each captured client's
    // poisoned dataset is fixed once here.
    const int mal = cfg.malicious_count();
    FederationState st;
    st.arch = arch;
    st.global = init_model(arch, cfg.seed);
    st.train_hp = cfg.train;
    st.eta = cfg.eta;
    st.select_k = static_cast<std::size_t>(cfg.selected_per_round);
    st.seed = cfg.seed;
    st.clients.resize(static_cast<std::size_t>(cfg.clients));
    bool flip_warned = false;
    for (int id = 0; id < cfg.clients; ++id) {
        ClientState& c = st.clients[static_cast<std::size_t>(id)];
        c.id = id;
        c.malicious = id < mal;
        c.clean_data = std::move(part.clients[static_cast<std::size_t>(id)]);
        if (c.malicious && cfg.attack.poison.kind != PoisonKind::none) {
            PoisonOutcome po = poison_dataset(c.clean_data, cfg.attack.poison,
                                              stream_seed(cfg.seed, {stream::poison,
                                                                     static_cast<std::uint64_t>(id)}));
            c.poisoned_data = std::move(po.dataset);
            if (po.no_source_warning && !flip_warned) {
                out.warnings.push_back("poison: client " + std::to_string(id) +
                                       " holds no source-class samples; dataset left clean");
                flip_warned = true;
            }
        } else {
            c.poisoned_data = c.clean_data;
        }
    }

    // Server-side root dataset (fltrust only): a small trusted draw from the
    // same distribution, truncated to the configured sample count.
    ClientDataset root_data;
    DefenseContext ctx;
    ctx.arch = &arch;
    if (cfg.defense.kind == DefenseKind::fltrust) {
        SyntheticSpec root_spec = cfg.data;
        root_spec.per_class =
            (cfg.defense.root_samples + static_cast<std::size_t>(cfg.data.class_count) - 1) /
            static_cast<std::size_t>(cfg.data.class_count);
        ClientDataset draw = gen_synthetic(root_spec, cfg.seed, 2);
        std::vector<std::size_t> order(draw.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(stream_seed(cfg.seed, {stream::data_gen, 0xf17}));
        rng.shuffle(order);
        order.resize(std::min(cfg.defense.root_samples, order.size()));
        std::sort(order.begin(), order.end());
        root_data.feature_dim = draw.feature_dim;
        for (std::size_t i : order) root_data.append_row(draw.row(i), draw.labels[i]);
        ctx.root_data = &root_data;
    }

    const std::size_t total_rounds = cfg.warmup_rounds + cfg.attack_rounds;
    out.rounds.reserve(total_rounds);
    for (std::size_t r = 0; r < total_rounds; ++r) {
        const bool defended = r >= cfg.warmup_rounds;
        RoundStats rs;
        rs.defended = defended;
        rs.rec = run_round(st, cfg.attack, cfg.defense, ctx, defended, threads);

        const EvalResult ev = evaluate_model(st.global, arch, clean_test, triggered_test);
        rs.ma = ev.ma;
        rs.ba = ev.ba;
        if (defended) {
            rs.det = detection_counts(rs.rec.flagged, rs.rec.malicious_selected,
                                      rs.rec.selected);
            out.detection += rs.det;
        }
        out.rounds.push_back(std::move(rs));
    }

    out.final_ma = out.rounds.back().ma;
    out.final_ba = out.rounds.back().ba;
    out.attack_effective = out.final_ba.has_value() && *out.final_ba >= 0.5;
    out.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                             t_start)
                       .count();
    return out;
}

// ---------------------------------------------------------------------------
// Serialization.  result.json is fully round-trippable; wall-clock numbers
// live in the "timing" object so determinism checks can drop that one key.
// ---------------------------------------------------------------------------

inline json result_to_json(const ExperimentResult& r) {
    json j;
    j["version"] = kVersion;
    j["config"] = config_to_json(r.config);

    json rounds = json::array();
    for (const RoundStats& rs : r.rounds) {
        json e;
        e["round"] = rs.rec.round;
        e["defended"] = rs.defended;
        e["selected"] = rs.rec.selected;
        e["malicious"] = rs.rec.malicious_selected;
        e["flagged"] = rs.rec.flagged;
        e["aborted"] = rs.rec.aborted;
        e["ma"] = rs.ma;
        e["ba"] = rs.ba ? json(*rs.ba) : json(nullptr);
        e["tp"] = rs.det.tp;
        e["fp"] = rs.det.fp;
        e["tn"] = rs.det.tn;
        e["fn"] = rs.det.fn;
        e["note"] = rs.rec.note;
        rounds.push_back(std::move(e));
    }
    j["rounds"] = std::move(rounds);

    json det;
    det["tp"] = r.detection.tp;
    det["fp"] = r.detection.fp;
    det["tn"] = r.detection.tn;
    det["fn"] = r.detection.fn;
    det["accuracy"] = r.detection.accuracy() ? json(*r.detection.accuracy()) : json(nullptr);
    det["fpr"] = r.detection.fpr() ? json(*r.detection.fpr()) : json(nullptr);
    det["fnr"] = r.detection.fnr() ? json(*r.detection.fnr()) : json(nullptr);

    j["final"] = {{"ma", r.final_ma},
                  {"ba", r.final_ba ? json(*r.final_ba) : json(nullptr)},
                  {"detection", det},
                  {"attack_effective", r.attack_effective}};
    j["warnings"] = r.warnings;

    json defense_ms = json::array();
    for (const RoundStats& rs : r.rounds) defense_ms.push_back(rs.rec.defense_ms);
    j["timing"] = {{"total_ms", r.total_ms}, {"defense_ms", std::move(defense_ms)}};
    return j;
}

inline ExperimentResult result_from_json(const json& j) {
    ExperimentResult r;
    ConfigParse cp = parse_config(j.at("config"));
    if (!cp.ok())
        throw std::invalid_argument("result_from_json: bad config echo: " + cp.errors.front());
    r.config = std::move(cp.config);

    for (const json& e : j.at("rounds")) {
        RoundStats rs;
        rs.rec.round = e.at("round").get<std::size_t>();
        rs.defended = e.at("defended").get<bool>();
        rs.rec.selected = e.at("selected").get<std::vector<int>>();
        rs.rec.malicious_selected = e.at("malicious").get<std::vector<int>>();
        rs.rec.flagged = e.at("flagged").get<std::vector<int>>();
        rs.rec.aborted = e.at("aborted").get<bool>();
        rs.ma = e.at("ma").get<double>();
        if (!e.at("ba").is_null()) rs.ba = e.at("ba").get<double>();
        rs.det.tp = e.at("tp").get<std::size_t>();
        rs.det.fp = e.at("fp").get<std::size_t>();
        rs.det.tn = e.at("tn").get<std::size_t>();
        rs.det.fn = e.at("fn").get<std::size_t>();
        rs.rec.note = e.at("note").get<std::string>();
        r.rounds.push_back(std::move(rs));
    }

    const json& fin = j.at("final");
    r.final_ma = fin.at("ma").get<double>();
    if (!fin.at("ba").is_null()) r.final_ba = fin.at("ba").get<double>();
    const json& det = fin.at("detection");
    r.detection.tp = det.at("tp").get<std::size_t>();
    r.detection.fp = det.at("fp").get<std::size_t>();
    r.detection.tn = det.at("tn").get<std::size_t>();
    r.detection.fn = det.at("fn").get<std::size_t>();
    r.attack_effective = fin.at("attack_effective").get<bool>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();

    r.total_ms = j.at("timing").at("total_ms").get<double>();
    const json& dm = j.at("timing").at("defense_ms");
    for (std::size_t i = 0; i < r.rounds.size() && i < dm.size(); ++i)
        r.rounds[i].rec.defense_ms = dm.at(i).get<double>();
    return r;
}

// One row per round; the ba cell is empty when the attack defines no backdoor.
inline std::string rounds_csv(const ExperimentResult& r) {
    std::ostringstream os;
    os.precision(17);
    os << "round,ma,ba,flagged_count,fp,fn,defense_ms\n";
    for (const RoundStats& rs : r.rounds) {
        os << rs.rec.round << ',' << rs.ma << ',';
        if (rs.ba) os << *rs.ba;
        os << ',' << rs.rec.flagged.size() << ',' << rs.det.fp << ',' << rs.det.fn << ','
           << rs.rec.defense_ms << "\n";
    }
    return os.str();
}

// Per defended round: who was filtered, plus the full per-iteration firing
// trail when the defense produces one.
inline json detection_to_json(const ExperimentResult& r) {
    json rounds = json::array();
    for (const RoundStats& rs : r.rounds) {
        if (!rs.defended) continue;
        json e;
        e["round"] = rs.rec.round;
        e["flagged"] = rs.rec.flagged;
        e["malicious"] = rs.rec.malicious_selected;
        e["aborted"] = rs.rec.aborted;
        if (rs.rec.report) {
            const DetectionReport& rep = *rs.rec.report;
            e["iterations"] = rep.iterations;
            e["kept"] = rep.kept;
            json firings = json::array();
            for (const Firing& f : rep.firings) {
                json fj;
                fj["iteration"] = f.iteration;
                fj["metric"] = metric_name(f.metric);
                fj["scope"] = f.scope;
                fj["flagged"] = f.flagged;
                json tests = json::array();
                for (const FiredTest& t : f.tests)
                    tests.push_back({{"name", t.name}, {"p_value", t.p_value}});
                fj["tests"] = std::move(tests);
                fj["sigma_outliers"] = f.sigma_outliers;
                firings.push_back(std::move(fj));
            }
            e["firings"] = std::move(firings);
        }
        rounds.push_back(std::move(e));
    }
    return json{{"rounds", std::move(rounds)}};
}

// ---------------------------------------------------------------------------
// Output files.  Writes go through a temp file in the same directory followed
// by a rename, so readers never observe a half-written result.
// ---------------------------------------------------------------------------

inline void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open for writing: " + tmp);
        os << content;
        os.flush();
        if (!os) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed: " + path);
}

inline void write_outputs(const ExperimentResult& r, const std::string& out_dir) {
    write_file_atomic(out_dir + "/result.json", result_to_json(r).dump(2) + "\n");
    write_file_atomic(out_dir + "/rounds.csv", rounds_csv(r));
    write_file_atomic(out_dir + "/detection.json", detection_to_json(r).dump(2) + "\n");
}

}  // namespace fedsim
