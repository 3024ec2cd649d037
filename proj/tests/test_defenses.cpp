#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fedsim/defenses.hpp"
#include "checks.hpp"

using namespace fedsim;

namespace {

LayeredModel one_layer(std::vector<double> v) {
    LayeredModel m;
    m.names = {"w1"};
    m.shapes = {{v.size()}};
    m.values = {std::move(v)};
    return m;
}

LayeredModel shifted(const LayeredModel& base, const std::vector<double>& delta) {
    std::vector<double> v = flatten(base);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += delta[i];
    return unflatten(v, base);
}

double update_norm(const LayeredModel& local, const LayeredModel& global) {
    double sq = 0.0;
    for (std::size_t l = 0; l < local.values.size(); ++l)
        for (std::size_t i = 0; i < local.values[l].size(); ++i) {
            const double d = local.values[l][i] - global.values[l][i];
            sq += d * d;
        }
    return std::sqrt(sq);
}

}  // namespace

TEST_CASE("robust aggregators match naive recomputation", "[defenses][oracle-suite]") {
    const auto out = checks::aggregator_oracle(100);
    INFO(out.detail);
    CHECK(out.ok);
    CHECK(out.cases >= 100);
}

TEST_CASE("krum scores and selection on a hand-checked line", "[defenses]") {
    // Dyadic spacing keeps every squared distance exact, so the score ties
    // below are real ties rather than 1e-17 artifacts.
    const std::vector<int> ids{10, 11, 12, 13, 14};
    std::vector<LayeredModel> locals;
    for (double x : {0.0, 0.25, 0.5, 0.75, 10.0}) locals.push_back(one_layer({x}));

    // f = 1: each score sums the 2 smallest squared distances.
    const KrumResult r = krum_select(ids, locals, 1, 1);
    REQUIRE(r.scores.size() == 5);
    CHECK(r.scores[0] == 0.3125);
    CHECK(r.scores[1] == 0.125);
    CHECK(r.scores[2] == 0.125);
    CHECK(r.scores[3] == 0.3125);
    CHECK(r.scores[4] > 90.0);
    // Tie between clients 11 and 12: the earlier submission wins.
    CHECK(r.kept == std::vector<int>{11});

    CHECK(krum_select(ids, locals, 1, 3).kept == std::vector<int>{10, 11, 12});
    // Even keeping all-but-one drops the far-away model.
    CHECK(krum_select(ids, locals, 1, 4).kept == std::vector<int>{10, 11, 12, 13});

    CHECK_THROWS_AS(krum_select({1, 2}, {locals[0], locals[1]}, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(krum_select(ids, locals, 3, 1), std::invalid_argument);  // n < f + 3
    CHECK_THROWS_AS(krum_select(ids, locals, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(krum_select(ids, locals, 1, 6), std::invalid_argument);
}

TEST_CASE("trimmed mean drops the extremes per coordinate", "[defenses]") {
    const LayeredModel global = one_layer({100.0});
    std::vector<LayeredModel> locals;
    for (double u : {-10.0, 1.0, 2.0, 3.0, 50.0}) locals.push_back(one_layer({100.0 + u}));

    // floor(0.2 * 5) = 1 from each end: mean of {1, 2, 3}.
    const LayeredModel t = trimmed_mean_aggregate(locals, global, 0.2);
    CHECK(t.values[0][0] == 102.0);

    // Zero trim is the plain mean of the updates.
    const LayeredModel m = trimmed_mean_aggregate(locals, global, 0.0);
    CHECK_THAT(m.values[0][0], Catch::Matchers::WithinRel(100.0 + 46.0 / 5.0, 1e-14));

    CHECK_THROWS_AS(trimmed_mean_aggregate({locals[0], locals[1]}, global, 0.5),
                    std::invalid_argument);
    CHECK_THROWS_AS(trimmed_mean_aggregate({}, global, 0.1), std::invalid_argument);
}

TEST_CASE("coordinate median takes the lower middle on even counts", "[defenses]") {
    const LayeredModel global = one_layer({0.0, 0.0});
    std::vector<LayeredModel> locals;
    locals.push_back(one_layer({1.0, 4.0}));
    locals.push_back(one_layer({2.0, 3.0}));
    locals.push_back(one_layer({3.0, 2.0}));
    locals.push_back(one_layer({4.0, 1.0}));

    const LayeredModel m = coordinate_median_aggregate(locals, global);
    CHECK(m.values[0][0] == 2.0);
    CHECK(m.values[0][1] == 2.0);

    locals.push_back(one_layer({0.0, 100.0}));  // odd count now: true middle
    const LayeredModel m2 = coordinate_median_aggregate(locals, global);
    CHECK(m2.values[0][0] == 2.0);
    CHECK(m2.values[0][1] == 3.0);

    CHECK_THROWS_AS(coordinate_median_aggregate({}, global), std::invalid_argument);
}

TEST_CASE("median-norm clipping shrinks only the oversized updates", "[defenses]") {
    const LayeredModel global = one_layer({0.0, 0.0});
    std::vector<LayeredModel> locals;
    locals.push_back(one_layer({1.0, 0.0}));   // norm 1
    locals.push_back(one_layer({0.0, 2.0}));   // norm 2 = median bound
    locals.push_back(one_layer({4.0, 0.0}));   // norm 4 -> scaled to 2

    const auto clipped = clip_updates(locals, global);
    REQUIRE(clipped.size() == 3);
    CHECK(clipped[0].values[0] == std::vector<double>{1.0, 0.0});  // under the bound: untouched
    CHECK(clipped[1].values[0] == std::vector<double>{0.0, 2.0});  // at the bound: untouched
    CHECK(clipped[2].values[0] == std::vector<double>{2.0, 0.0});  // halved
    CHECK_THAT(update_norm(clipped[2], global), Catch::Matchers::WithinRel(2.0, 1e-12));

    // A zero update survives clipping as-is.
    std::vector<LayeredModel> with_zero{global, locals[0], locals[2]};
    const auto c2 = clip_updates(with_zero, global);
    CHECK(c2[0].values == global.values);

    CHECK_THROWS_AS(clip_updates({}, global), std::invalid_argument);
}

TEST_CASE("clip-and-noise: seeded blur on top of the clipped mean", "[defenses]") {
    const LayeredModel global = one_layer({0.5, -0.5, 1.0});
    std::vector<LayeredModel> locals;
    std::mt19937_64 eng(31);
    std::normal_distribution<double> g(0.0, 0.2);
    for (int i = 0; i < 5; ++i)
        locals.push_back(shifted(global, {g(eng), g(eng), g(eng)}));

    const LayeredModel a = clip_and_noise_aggregate(locals, global, 0.01, 7);
    CHECK(a.values == clip_and_noise_aggregate(locals, global, 0.01, 7).values);
    CHECK(a.values != clip_and_noise_aggregate(locals, global, 0.01, 8).values);

    // The noise layer scales linearly with sigma for a fixed seed, around the
    // clipped mean.
    LayeredModel mean = zeros_like(global);
    for (const auto& m : clip_updates(locals, global)) add_scaled(mean, m, 0.2);
    const LayeredModel b = clip_and_noise_aggregate(locals, global, 0.02, 7);
    for (std::size_t i = 0; i < 3; ++i) {
        const double na = a.values[0][i] - mean.values[0][i];
        const double nb = b.values[0][i] - mean.values[0][i];
        CHECK_THAT(nb, Catch::Matchers::WithinRel(2.0 * na, 1e-9));
    }

    CHECK_THROWS_AS(clip_and_noise_aggregate(locals, global, 0.0, 1), std::invalid_argument);
}

TEST_CASE("naive cosine clustering keeps the larger aligned pack", "[defenses]") {
    const std::size_t dim = 12;
    std::mt19937_64 eng(17);
    std::normal_distribution<double> small(0.0, 0.02);
    std::vector<double> direction(dim);
    for (double& x : direction) x = small(eng) * 50.0;

    const LayeredModel global = one_layer(std::vector<double>(dim, 0.25));
    std::vector<int> ids;
    std::vector<LayeredModel> locals;
    for (int i = 0; i < 6; ++i) {
        std::vector<double> d = direction;
        for (double& x : d) x += small(eng);
        locals.push_back(shifted(global, d));
        ids.push_back(i);
    }
    for (int i = 6; i < 8; ++i) {  // sign-flipped pair
        std::vector<double> d = direction;
        for (double& x : d) x = -x + small(eng);
        locals.push_back(shifted(global, d));
        ids.push_back(i);
    }

    CHECK(naive_cluster_filter(ids, locals, global) == std::vector<int>{0, 1, 2, 3, 4, 5});

    // A zero-norm update has no cosine row and is kept unconditionally.
    locals.push_back(global);
    ids.push_back(8);
    const auto kept = naive_cluster_filter(ids, locals, global);
    CHECK(std::find(kept.begin(), kept.end(), 8) != kept.end());

    CHECK_THROWS_AS(naive_cluster_filter({1}, {global}, global), std::invalid_argument);
}

TEST_CASE("the last-layer filter sees what whole-model cosine misses", "[defenses]") {
    // Two-layer models: body (w1) updates scatter widely from client to
    // client, while the attack is a clean sign flip confined to the output
    // layer.  Whole-model angles are dominated by the body scatter; slicing
    // the head isolates the flip.
    std::mt19937_64 eng(23);
    std::normal_distribution<double> body_jitter(0.0, 0.8);
    std::normal_distribution<double> head_jitter(0.0, 0.02);

    LayeredModel global;
    global.names = {"w1", "b1", "w2", "b2"};
    global.shapes = {{6}, {3}, {4}, {2}};
    global.values = {std::vector<double>(6, 0.1), std::vector<double>(3, 0.0),
                     std::vector<double>(4, 0.2), std::vector<double>(2, 0.0)};

    const std::vector<double> shared_w1{2.0, -1.5, 1.0, 0.5, -2.0, 1.5};
    const std::vector<double> head_dir{0.3, -0.2, 0.25, -0.35, 0.1, -0.15};

    std::vector<int> ids;
    std::vector<LayeredModel> locals;
    for (int i = 0; i < 9; ++i) {
        const double head_sign = i < 7 ? 1.0 : -1.0;  // attackers invert the head
        LayeredModel m = global;
        for (std::size_t k = 0; k < 6; ++k)
            m.values[0][k] += shared_w1[k] + body_jitter(eng);
        for (std::size_t k = 0; k < 4; ++k)
            m.values[2][k] += head_sign * head_dir[k] + head_jitter(eng);
        for (std::size_t k = 0; k < 2; ++k)
            m.values[3][k] += head_sign * head_dir[4 + k] + head_jitter(eng);
        locals.push_back(std::move(m));
        ids.push_back(i);
    }

    CHECK(last_layer_cosine_filter(ids, locals, global) ==
          std::vector<int>{0, 1, 2, 3, 4, 5, 6});
    // The whole-model filter splits on body scatter instead and fails to
    // isolate the attackers.
    CHECK(naive_cluster_filter(ids, locals, global) !=
          std::vector<int>{0, 1, 2, 3, 4, 5, 6});

    const LayeredModel single = one_layer({1.0});
    CHECK_THROWS_AS(last_layer_cosine_filter({1, 2}, {single, single}, single),
                    std::invalid_argument);
}

TEST_CASE("fltrust trusts by clipped cosine and rescales to the server norm", "[defenses]") {
    MlpArchitecture arch;
    arch.input_dim = 3;
    arch.hidden_dims = {};
    arch.class_count = 2;
    SyntheticSpec sp;
    sp.class_count = 2;
    sp.feature_dim = 3;
    sp.per_class = 20;
    const ClientDataset root = gen_synthetic(sp, 61);
    const LayeredModel global = init_model(arch, 5);

    TrainHyperparams hp;
    hp.learning_rate = 0.05;
    hp.epochs = 2;
    hp.batch_size = 16;
    hp.rng_seed = 3;

    // Recover the server update to build aligned/misaligned clients.
    const LayeredModel server = train_local(global, arch, root, hp);
    std::vector<double> u0 = flatten(server);
    const std::vector<double> g = flatten(global);
    for (std::size_t i = 0; i < u0.size(); ++i) u0[i] -= g[i];

    std::vector<double> twice = g, opposite = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
        twice[i] += 2.0 * u0[i];
        opposite[i] -= u0[i];
    }

    // A single perfectly aligned client at twice the norm: trust 1, rescaled
    // back onto the server update exactly.
    const FltrustResult solo =
        fltrust({4}, {unflatten(twice, global)}, global, arch, root, hp);
    CHECK_FALSE(solo.abstained);
    CHECK_THAT(solo.weights.at(4), Catch::Matchers::WithinRel(1.0, 1e-12));
    const std::vector<double> agg = flatten(solo.aggregate);
    for (std::size_t i = 0; i < g.size(); ++i)
        CHECK_THAT(agg[i], Catch::Matchers::WithinAbs(g[i] + u0[i], 1e-9));

    // A sign-flipped client earns zero trust; with no trusted client at all
    // the aggregate stays at the global.
    const FltrustResult rejected =
        fltrust({1}, {unflatten(opposite, global)}, global, arch, root, hp);
    CHECK(rejected.weights.at(1) == 0.0);
    CHECK(flatten(rejected.aggregate) == g);

    // Mixed population: the trusted client carries all the weight.
    const FltrustResult mixed = fltrust({1, 2}, {unflatten(opposite, global),
                                                 unflatten(twice, global)},
                                        global, arch, root, hp);
    CHECK(mixed.weights.at(1) == 0.0);
    CHECK_THAT(mixed.weights.at(2), Catch::Matchers::WithinRel(1.0, 1e-12));

    CHECK_THROWS_AS(fltrust({}, {}, global, arch, root, hp), std::invalid_argument);
    CHECK_THROWS_AS(fltrust({1}, {global}, global, arch, ClientDataset{}, hp),
                    std::invalid_argument);
}

TEST_CASE("fltrust abstains when the root update has zero norm", "[defenses]") {
    MlpArchitecture arch;
    arch.input_dim = 2;
    arch.hidden_dims = {};
    arch.class_count = 2;
    SyntheticSpec sp;
    sp.class_count = 2;
    sp.feature_dim = 2;
    sp.per_class = 5;
    const ClientDataset root = gen_synthetic(sp, 71);
    const LayeredModel global = init_model(arch, 9);

    TrainHyperparams hp;
    hp.learning_rate = 0.0;  // the server model cannot move

    const LayeredModel a = shifted(global, {1.0, 0.0, 0.0, 0.0, 0.0, 0.0});
    const LayeredModel b = shifted(global, {0.0, -1.0, 0.0, 0.0, 0.0, 0.0});
    const FltrustResult r = fltrust({5, 6}, {a, b}, global, arch, root, hp);
    CHECK(r.abstained);
    CHECK(r.weights.at(5) == 0.5);
    CHECK(r.weights.at(6) == 0.5);
    // Plain mean fallback.
    const std::vector<double> agg = flatten(r.aggregate);
    const std::vector<double> ga = flatten(a), gb = flatten(b);
    for (std::size_t i = 0; i < agg.size(); ++i)
        CHECK_THAT(agg[i], Catch::Matchers::WithinAbs(0.5 * (ga[i] + gb[i]), 1e-12));
}

TEST_CASE("defense spec validation", "[defenses]") {
    DefenseSpec s;
    CHECK_NOTHROW(validate_defense_spec(s));
    s.krum_benign_fraction = 0.5;
    CHECK_THROWS_AS(validate_defense_spec(s), std::invalid_argument);
    s = {};
    s.m_krum_rate = 0.0;
    CHECK_THROWS_AS(validate_defense_spec(s), std::invalid_argument);
    s = {};
    s.trim_fraction = 0.5;
    CHECK_THROWS_AS(validate_defense_spec(s), std::invalid_argument);
    s = {};
    s.kind = DefenseKind::clip_noise;
    s.noise_sigma = 0.0;
    CHECK_THROWS_AS(validate_defense_spec(s), std::invalid_argument);
    s = {};
    s.kind = DefenseKind::fltrust;
    s.root_samples = 0;
    CHECK_THROWS_AS(validate_defense_spec(s), std::invalid_argument);
    s = {};
    s.kind = DefenseKind::mesas;
    s.mesas.min_population = 2;
    CHECK_THROWS_AS(validate_defense_spec(s), std::invalid_argument);
}

TEST_CASE("the dispatcher shapes outcomes by defense family", "[defenses]") {
    std::mt19937_64 eng(41);
    std::normal_distribution<double> g(0.0, 0.05);
    const LayeredModel global = one_layer(std::vector<double>(10, 1.0));
    std::vector<int> ids;
    std::vector<LayeredModel> locals;
    for (int i = 0; i < 8; ++i) {
        std::vector<double> d(10);
        for (double& x : d) x = g(eng);
        locals.push_back(shifted(global, d));
        ids.push_back(i);
    }
    DefenseContext ctx;
    ctx.seed = 12;

    DefenseSpec spec;
    spec.kind = DefenseKind::none;
    auto out = apply_defense(spec, ids, locals, global, ctx);
    CHECK(out.kind == DefenseOutcome::Kind::keep_set);
    CHECK(out.kept == ids);
    CHECK_FALSE(out.report.has_value());

    spec.kind = DefenseKind::mesas;
    out = apply_defense(spec, ids, locals, global, ctx);
    CHECK(out.kind == DefenseOutcome::Kind::keep_set);
    CHECK(out.report.has_value());

    spec.kind = DefenseKind::krum;  // benign fraction 0.7 -> f = floor(0.3*8) = 2
    out = apply_defense(spec, ids, locals, global, ctx);
    CHECK(out.kind == DefenseOutcome::Kind::keep_set);
    CHECK(out.kept.size() == 1);

    spec.kind = DefenseKind::m_krum;  // m = ceil(0.3*8) = 3
    out = apply_defense(spec, ids, locals, global, ctx);
    CHECK(out.kept.size() == 3);

    for (auto kind : {DefenseKind::trimmed_mean, DefenseKind::coord_median,
                      DefenseKind::clip_noise}) {
        spec = {};
        spec.kind = kind;
        out = apply_defense(spec, ids, locals, global, ctx);
        CHECK(out.kind == DefenseOutcome::Kind::aggregate);
        REQUIRE(out.aggregate.has_value());
        CHECK(out.aggregate->same_schema(global));
    }

    spec = {};
    spec.kind = DefenseKind::clip;
    out = apply_defense(spec, ids, locals, global, ctx);
    CHECK(out.kind == DefenseOutcome::Kind::transformed);
    CHECK(out.transformed.size() == locals.size());

    spec.kind = DefenseKind::naive_cluster;
    out = apply_defense(spec, ids, locals, global, ctx);
    CHECK(out.kind == DefenseOutcome::Kind::keep_set);

    // FLTrust needs its context.
    spec = {};
    spec.kind = DefenseKind::fltrust;
    CHECK_THROWS_AS(apply_defense(spec, ids, locals, global, ctx), std::invalid_argument);
}
