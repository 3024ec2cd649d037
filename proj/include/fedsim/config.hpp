#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/attacks.hpp"
#include "fedsim/data.hpp"
#include "fedsim/defenses.hpp"
#include "fedsim/mlp.hpp"

namespace fedsim {

using nlohmann::json;

// Everything a run needs.  Defaults mirror the reference desk-scale scenario;
// a config file only has to name what it changes.
struct ExperimentConfig {
    std::uint64_t seed = 42;
    int clients = 20;
    int selected_per_round = 20;
    double pmr = 0.45;  // fraction of the round's models under adversary control
    double eta = 1.0;
    std::size_t warmup_rounds = 10;
    std::size_t attack_rounds = 5;

    std::vector<std::size_t> hidden_dims = {32, 16};

    TrainHyperparams train;  // rng_seed is ignored; per-client seeds are derived

    SyntheticSpec data;
    std::size_t test_per_class = 100;
    PartitionSpec partition;

    AttackSpec attack;
    DefenseSpec defense;

    MlpArchitecture architecture() const {
        MlpArchitecture a;
        a.input_dim = data.feature_dim;
        a.hidden_dims = hidden_dims;
        a.class_count = data.class_count;
        return a;
    }

    int malicious_count() const {
        return pmr <= 0.0 ? 0
                          : static_cast<int>(std::ceil(pmr * static_cast<double>(clients)));
    }
};

struct ConfigParse {
    ExperimentConfig config;
    std::vector<std::string> errors;
    bool ok() const { return errors.empty(); }
};

namespace cfgdetail {

// Thin reader that remembers its JSON path for error messages and tracks
// which keys were consumed, so typos surface as "unknown key" errors instead
// of silently running with defaults.
class ObjReader {
public:
    ObjReader(const json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(&errors) {
        if (!j_.is_object()) err("must be an object");
    }

    bool has(const std::string& key) {
        return j_.is_object() && j_.contains(key);
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        if (!j_.is_object() || !j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            err(key + ": wrong type");
        }
    }

    // Enum-by-name with an exhaustive error message.
    template <typename E, typename NameFn>
    void read_enum(const std::string& key, E& out, const std::vector<E>& all, NameFn name) {
        if (!j_.is_object() || !j_.contains(key)) return;
        seen_.insert(key);
        if (!j_.at(key).is_string()) {
            err(key + ": wrong type");
            return;
        }
        const std::string v = j_.at(key).get<std::string>();
        std::string valid;
        for (E e : all) {
            if (v == name(e)) {
                out = e;
                return;
            }
            if (!valid.empty()) valid += ", ";
            valid += name(e);
        }
        err(key + ": unknown value '" + v + "' (expected one of: " + valid + ")");
    }

    const json* child(const std::string& key) {
        if (!j_.is_object() || !j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void err(const std::string& msg) { errors_->push_back(path_ + ": " + msg); }

    // Flag keys nobody asked for.
    void finish() {
        if (!j_.is_object()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) err("unknown key '" + it.key() + "'");
    }

    std::string sub(const std::string& key) const { return path_ + "." + key; }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string>* errors_;
    std::set<std::string> seen_;
};

inline void check(bool cond, const std::string& path, const std::string& msg,
                  std::vector<std::string>& errors) {
    if (!cond) errors.push_back(path + ": " + msg);
}

}  // namespace cfgdetail

inline ConfigParse parse_config(const json& root) {
    ConfigParse out;
    ExperimentConfig& c = out.config;
    auto& errors = out.errors;
    using cfgdetail::ObjReader;
    using cfgdetail::check;

    ObjReader top(root, "config", errors);
    top.read("seed", c.seed);
    top.read("clients", c.clients);
    top.read("selected_per_round", c.selected_per_round);
    top.read("pmr", c.pmr);
    top.read("eta", c.eta);
    top.read("warmup_rounds", c.warmup_rounds);
    top.read("attack_rounds", c.attack_rounds);

    if (const json* jm = top.child("model")) {
        ObjReader m(*jm, "config.model", errors);
        m.read("hidden_dims", c.hidden_dims);
        m.finish();
    }
    if (const json* jt = top.child("train")) {
        ObjReader t(*jt, "config.train", errors);
        t.read("learning_rate", c.train.learning_rate);
        t.read("momentum", c.train.momentum);
        t.read("weight_decay", c.train.weight_decay);
        t.read("batch_size", c.train.batch_size);
        t.read("epochs", c.train.epochs);
        t.finish();
    }
    if (const json* jd = top.child("data")) {
        ObjReader d(*jd, "config.data", errors);
        d.read("class_count", c.data.class_count);
        d.read("feature_dim", c.data.feature_dim);
        d.read("per_class", c.data.per_class);
        d.read("spread", c.data.spread);
        d.read("test_per_class", c.test_per_class);
        if (const json* jp = d.child("partition")) {
            ObjReader p(*jp, "config.data.partition", errors);
            p.read_enum("strategy", c.partition.strategy,
                        {PartitionStrategy::iid, PartitionStrategy::one_class,
                         PartitionStrategy::two_class, PartitionStrategy::dirichlet,
                         PartitionStrategy::normal, PartitionStrategy::random_gen},
                        partition_strategy_name);
            p.read("gamma", c.partition.gamma);
            p.read("concentration", c.partition.concentration);
            p.read("samples_per_client", c.partition.samples_per_client);
            p.finish();
        }
        d.finish();
    }
    if (const json* ja = top.child("attack")) {
        ObjReader a(*ja, "config.attack", errors);
        if (const json* jp = a.child("poison")) {
            ObjReader p(*jp, "config.attack.poison", errors);
            p.read_enum("kind", c.attack.poison.kind,
                        {PoisonKind::none, PoisonKind::pixel_trigger, PoisonKind::clean_label,
                         PoisonKind::label_flip, PoisonKind::random_flip},
                        poison_kind_name);
            p.read("pdr", c.attack.poison.pdr);
            p.read("target_label", c.attack.poison.target_label);
            p.read("source_label", c.attack.poison.source_label);
            p.read("trigger_fraction", c.attack.poison.trigger_fraction);
            if (p.has("trigger_value") && !jp->at("trigger_value").is_null())
                p.read("trigger_value", c.attack.poison.trigger_value);
            else if (p.has("trigger_value"))
                p.child("trigger_value");  // explicit null = observed max
            p.finish();
        }
        if (const json* jad = a.child("adaptive")) {
            AdaptiveSpec spec;
            ObjReader ad(*jad, "config.attack.adaptive", errors);
            std::vector<std::string> names;
            ad.read("objectives", names);
            for (const auto& n : names) {
                bool matched = false;
                for (std::size_t i = 0; i < metric_count; ++i) {
                    if (n == metric_name(static_cast<Metric>(i))) {
                        spec.objectives.push_back(static_cast<Metric>(i));
                        matched = true;
                        break;
                    }
                }
                if (!matched)
                    ad.err("objectives: unknown metric '" + n + "'");
                else if (spec.objectives.back() == Metric::count)
                    ad.err("objectives: count is not adaptable (zero gradient)");
            }
            ad.read("alpha", spec.alpha);
            spec.targets.assign(spec.objectives.size(), 0.0);  // resolved from probes
            ad.finish();
            c.attack.adaptive = std::move(spec);
        }
        if (const json* jpost = a.child("post")) {
            if (!jpost->is_array()) {
                errors.push_back("config.attack.post: must be an array");
            } else {
                for (std::size_t i = 0; i < jpost->size(); ++i) {
                    PostStep step;
                    ObjReader ps(jpost->at(i), "config.attack.post[" + std::to_string(i) + "]",
                                 errors);
                    ps.read_enum("kind", step.kind,
                                 {PostStepKind::sign_flip, PostStepKind::noise,
                                  PostStepKind::scale_to_benign_eucl, PostStepKind::fixate},
                                 post_step_name);
                    ps.read("sigma", step.sigma);
                    ps.read("layers", step.layers);
                    ps.finish();
                    c.attack.post.push_back(std::move(step));
                }
            }
        }
        a.finish();
    }
    if (const json* jdef = top.child("defense")) {
        ObjReader d(*jdef, "config.defense", errors);
        d.read_enum("kind", c.defense.kind,
                    {DefenseKind::none, DefenseKind::mesas, DefenseKind::krum,
                     DefenseKind::m_krum, DefenseKind::trimmed_mean, DefenseKind::coord_median,
                     DefenseKind::clip, DefenseKind::clip_noise, DefenseKind::naive_cluster,
                     DefenseKind::fltrust, DefenseKind::last_layer_cos},
                    defense_kind_name);
        d.read("significance_level", c.defense.mesas.significance_level);
        d.read("min_population", c.defense.mesas.min_population);
        d.read("max_iterations", c.defense.mesas.max_iterations);
        d.read("krum_benign_fraction", c.defense.krum_benign_fraction);
        d.read("m_krum_rate", c.defense.m_krum_rate);
        d.read("trim_fraction", c.defense.trim_fraction);
        d.read("noise_sigma", c.defense.noise_sigma);
        d.read("root_samples", c.defense.root_samples);
        d.finish();
    }
    top.finish();

    // -- Range and cross-field validation, reported with field paths. --
    check(c.clients >= 2, "config.clients", "need at least 2 clients", errors);
    check(c.selected_per_round >= 1 && c.selected_per_round <= c.clients,
          "config.selected_per_round", "outside [1, clients]", errors);
    check(c.pmr >= 0.0 && c.pmr < 1.0, "config.pmr", "outside [0, 1)", errors);
    check(c.eta > 0.0, "config.eta", "must be positive", errors);
    check(c.warmup_rounds + c.attack_rounds >= 1, "config", "no rounds to run", errors);
    for (std::size_t h : c.hidden_dims)
        check(h >= 1, "config.model.hidden_dims", "dims must be positive", errors);

    check(c.train.learning_rate > 0.0, "config.train.learning_rate", "must be positive", errors);
    check(c.train.momentum >= 0.0 && c.train.momentum < 1.0, "config.train.momentum",
          "outside [0, 1)", errors);
    check(c.train.weight_decay >= 0.0, "config.train.weight_decay", "must be non-negative",
          errors);
    check(c.train.batch_size >= 1, "config.train.batch_size", "must be positive", errors);
    check(c.train.epochs >= 1, "config.train.epochs", "must be positive", errors);

    check(c.data.class_count >= 2, "config.data.class_count", "need at least 2 classes", errors);
    check(c.data.feature_dim >= 1, "config.data.feature_dim", "must be positive", errors);
    check(c.data.per_class >= 1, "config.data.per_class", "must be positive", errors);
    check(c.data.spread > 0.0, "config.data.spread", "must be positive", errors);
    check(c.test_per_class >= 1, "config.data.test_per_class", "must be positive", errors);
    check(c.partition.gamma >= 0.0 && c.partition.gamma <= 1.0, "config.data.partition.gamma",
          "outside [0, 1]", errors);
    check(c.partition.concentration > 0.0, "config.data.partition.concentration",
          "must be positive", errors);
    check(c.partition.samples_per_client >= 1, "config.data.partition.samples_per_client",
          "must be positive", errors);

    const PoisonSpec& ps = c.attack.poison;
    if (ps.kind != PoisonKind::none) {
        check(ps.pdr > 0.0 && ps.pdr <= 1.0, "config.attack.poison.pdr", "outside (0, 1]",
              errors);
        check(ps.target_label >= 0 && ps.target_label < c.data.class_count,
              "config.attack.poison.target_label", "outside class range", errors);
        check(ps.trigger_fraction > 0.0 && ps.trigger_fraction <= 1.0,
              "config.attack.poison.trigger_fraction", "outside (0, 1]", errors);
        if (ps.kind == PoisonKind::label_flip) {
            check(ps.source_label >= 0 && ps.source_label < c.data.class_count,
                  "config.attack.poison.source_label", "outside class range", errors);
            check(ps.source_label != ps.target_label, "config.attack.poison.source_label",
                  "source equals target", errors);
        }
    }
    c.attack.poison.class_count = c.data.class_count;

    if (c.attack.adaptive) {
        check(!c.attack.adaptive->objectives.empty(), "config.attack.adaptive.objectives",
              "must not be empty", errors);
        check(c.attack.adaptive->alpha >= 0.0 && c.attack.adaptive->alpha <= 1.0,
              "config.attack.adaptive.alpha", "outside [0, 1]", errors);
    }
    {
        // Fixate layer names must exist in the derived schema.
        std::set<std::string> layer_names;
        for (std::size_t l = 0; l + 1 < c.hidden_dims.size() + 2; ++l) {
            layer_names.insert("w" + std::to_string(l + 1));
            layer_names.insert("b" + std::to_string(l + 1));
        }
        for (std::size_t i = 0; i < c.attack.post.size(); ++i) {
            const PostStep& step = c.attack.post[i];
            const std::string path = "config.attack.post[" + std::to_string(i) + "]";
            if (step.kind == PostStepKind::noise)
                check(step.sigma > 0.0, path + ".sigma", "must be positive", errors);
            if (step.kind == PostStepKind::fixate) {
                check(!step.layers.empty(), path + ".layers", "must not be empty", errors);
                for (const auto& name : step.layers)
                    check(layer_names.count(name) == 1, path + ".layers",
                          "unknown layer '" + name + "'", errors);
            }
        }
    }

    const DefenseSpec& ds = c.defense;
    check(ds.mesas.significance_level > 0.0 && ds.mesas.significance_level < 1.0,
          "config.defense.significance_level", "outside (0, 1)", errors);
    check(ds.mesas.min_population >= 4, "config.defense.min_population",
          "must be at least 4", errors);
    check(ds.krum_benign_fraction > 0.5 && ds.krum_benign_fraction <= 1.0,
          "config.defense.krum_benign_fraction", "outside (0.5, 1]", errors);
    check(ds.m_krum_rate > 0.0 && ds.m_krum_rate <= 1.0, "config.defense.m_krum_rate",
          "outside (0, 1]", errors);
    check(ds.trim_fraction >= 0.0 && ds.trim_fraction < 0.5, "config.defense.trim_fraction",
          "outside [0, 0.5)", errors);
    check(ds.noise_sigma > 0.0, "config.defense.noise_sigma", "must be positive", errors);
    check(ds.root_samples >= 1, "config.defense.root_samples", "must be positive", errors);

    // Threat-model sanity: the benign clients must hold a strict majority
    // (at least floor(k/2) + 1 of the k models each round).
    if (c.pmr > 0.0) {
        const int k = c.selected_per_round;
        const int mal_in_round = static_cast<int>(std::ceil(c.pmr * static_cast<double>(k)));
        check(k - mal_in_round >= k / 2 + 1, "config.pmr", "breaks the benign majority", errors);
    }
    if (ds.kind == DefenseKind::krum || ds.kind == DefenseKind::m_krum) {
        const int n = c.selected_per_round;
        const int f = static_cast<int>(std::floor((1.0 - ds.krum_benign_fraction) * n));
        check(n - f - 2 >= 1, "config.defense", "krum needs n - f - 2 >= 1", errors);
    }
    if (ds.kind == DefenseKind::trimmed_mean) {
        const int n = c.selected_per_round;
        const int k2 = 2 * static_cast<int>(std::floor(ds.trim_fraction * n));
        check(n - k2 >= 1, "config.defense.trim_fraction", "trims away every value", errors);
    }

    return out;
}

// Canonical echo of a parsed config: every field, defaults included, so the
// result file fully describes the run.
inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["clients"] = c.clients;
    j["selected_per_round"] = c.selected_per_round;
    j["pmr"] = c.pmr;
    j["eta"] = c.eta;
    j["warmup_rounds"] = c.warmup_rounds;
    j["attack_rounds"] = c.attack_rounds;
    j["model"] = {{"hidden_dims", c.hidden_dims}};
    j["train"] = {{"learning_rate", c.train.learning_rate},
                  {"momentum", c.train.momentum},
                  {"weight_decay", c.train.weight_decay},
                  {"batch_size", c.train.batch_size},
                  {"epochs", c.train.epochs}};
    json part = {{"strategy", partition_strategy_name(c.partition.strategy)},
                 {"gamma", c.partition.gamma},
                 {"concentration", c.partition.concentration},
                 {"samples_per_client", c.partition.samples_per_client}};
    j["data"] = {{"class_count", c.data.class_count},
                 {"feature_dim", c.data.feature_dim},
                 {"per_class", c.data.per_class},
                 {"spread", c.data.spread},
                 {"test_per_class", c.test_per_class},
                 {"partition", part}};
    json poison = {{"kind", poison_kind_name(c.attack.poison.kind)},
                   {"pdr", c.attack.poison.pdr},
                   {"target_label", c.attack.poison.target_label},
                   {"source_label", c.attack.poison.source_label},
                   {"trigger_fraction", c.attack.poison.trigger_fraction}};
    if (std::isnan(c.attack.poison.trigger_value)) poison["trigger_value"] = nullptr;
    else poison["trigger_value"] = c.attack.poison.trigger_value;
    json attack = {{"poison", poison}};
    if (c.attack.adaptive) {
        json names = json::array();
        for (Metric m : c.attack.adaptive->objectives) names.push_back(metric_name(m));
        attack["adaptive"] = {{"objectives", names}, {"alpha", c.attack.adaptive->alpha}};
    }
    if (!c.attack.post.empty()) {
        json post = json::array();
        for (const PostStep& s : c.attack.post) {
            json step = {{"kind", post_step_name(s.kind)}};
            if (s.kind == PostStepKind::noise) step["sigma"] = s.sigma;
            if (s.kind == PostStepKind::fixate) step["layers"] = s.layers;
            post.push_back(step);
        }
        attack["post"] = post;
    }
    j["attack"] = attack;
    j["defense"] = {{"kind", defense_kind_name(c.defense.kind)},
                    {"significance_level", c.defense.mesas.significance_level},
                    {"min_population", c.defense.mesas.min_population},
                    {"max_iterations", c.defense.mesas.max_iterations},
                    {"krum_benign_fraction", c.defense.krum_benign_fraction},
                    {"m_krum_rate", c.defense.m_krum_rate},
                    {"trim_fraction", c.defense.trim_fraction},
                    {"noise_sigma", c.defense.noise_sigma},
                    {"root_samples", c.defense.root_samples}};
    return j;
}

// Apply one "dotted.path=value" override onto a raw config JSON.  The value is
// parsed as JSON when possible and kept as a string otherwise; intermediate
// objects are created as needed and validation sorts out the rest.
inline void apply_override(json& root, const std::string& keyval) {
    const std::size_t eq = keyval.find('=');
    if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("override must look like key.path=value: " + keyval);
    const std::string path = keyval.substr(0, eq);
    const std::string raw = keyval.substr(eq + 1);

    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // unquoted string, e.g. defense.kind=mesas
    }

    json* node = &root;
    std::size_t start = 0;
    for (;;) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) throw std::invalid_argument("override has an empty path segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace fedsim
