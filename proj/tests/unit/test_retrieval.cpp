#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "helpers.hpp"
#include "oracles.hpp"
#include "protego/retrieval.hpp"

using namespace protego;
using testing::random_model;
using testing::random_unit;

namespace {

Database random_db(Rng& rng, std::size_t n, std::size_t dim) {
    Database db;
    db.model_id = "m";
    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(3 * i + 1);
    rng.shuffle(ids);
    for (std::size_t i = 0; i < n; ++i) {
        DBEntry e;
        e.entry_id = ids[i];
        e.identity_id = static_cast<int>(rng.index(7));
        // Duplicate an earlier feature now and then to force ties.
        e.feature = (i > 0 && rng.uniform() < 0.2) ? db.entries[rng.index(i)].feature : random_unit(dim, rng);
        db.entries.push_back(e);
    }
    return db;
}

const World& small_world() {
    static const World w = sample_world(3, 2, 10, 13, testing::small_world(16));
    return w;
}

PPTMap random_ppts(const World& w, std::uint64_t seed) {
    PPTMap out;
    Rng rng(seed);
    for (const auto& u : w.users) {
        PPT p = PPT::zeros(16, 16, 3, 0.063, u.user_id);
        for (auto& x : p.texture.data) x = rng.uniform(-0.063, 0.063);
        p.meta.ensemble_ids = {"ensemble-member"};
        out.emplace(u.user_id, p);
    }
    return out;
}

}  // namespace

TEST_CASE("search matches the exhaustive-sort oracle") {
    Rng rng(2024);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.index(1000);
        const Database db = random_db(rng, n, 8);
        const FeatureVector q = rng.uniform() < 0.3 ? db.entries[rng.index(n)].feature : random_unit(8, rng);
        const std::size_t k = 1 + rng.index(n);
        const auto hits = search(q, db, k);
        const auto ref = oracle::rank(q, db);
        REQUIRE(hits.size() == k);
        for (std::size_t i = 0; i < k; ++i) {
            CHECK(hits[i].entry_id == ref[i].first);
            CHECK(std::abs(hits[i].similarity - ref[i].second) < 1e-12);
        }
    }
}

TEST_CASE("recall matches the top-K oracle") {
    Rng rng(7);
    for (int t = 0; t < 50; ++t) {
        const Database db = random_db(rng, 50 + rng.index(200), 8);
        const int identity = db.entries[rng.index(db.size())].identity_id;
        const FeatureVector q = random_unit(8, rng);
        const auto ref = oracle::rank(q, db);
        std::size_t k = 0;
        for (const auto& e : db.entries) k += e.identity_id == identity;
        CHECK(db.count_identity(identity) == k);
        std::size_t good = 0;
        for (std::size_t i = 0; i < k; ++i) {
            const auto it = std::find_if(db.entries.begin(), db.entries.end(),
                                         [&](const DBEntry& e) { return e.entry_id == ref[i].first; });
            good += it->identity_id == identity;
        }
        CHECK(recall(q, identity, db) == doctest::Approx(100.0 * good / k).epsilon(1e-12));
    }
}

TEST_CASE("search and recall errors") {
    Rng rng(1);
    const Database db = random_db(rng, 10, 8);
    const auto q = random_unit(8, rng);
    CHECK_THROWS_AS(search(q, db, 0), BoundsError);
    CHECK_THROWS_AS(search(q, db, 11), BoundsError);
    CHECK_THROWS_AS(recall(q, 999, db), UndefinedMetricError);
    const auto m = random_model(Architecture::Conv3, 16, 8, 5, "other");
    CHECK_THROWS_AS(search(Image(16, 16, 3, 0.5), *m, db, 1), ConsistencyError);
    CHECK_THROWS_AS(recall(Image(16, 16, 3, 0.5), 1, *m, db), ConsistencyError);
}

TEST_CASE("build_db embeds every image with the model") {
    const auto& w = small_world();
    const auto m = random_model(Architecture::Conv4, 16, 8, 6, "intruder");
    std::vector<DBImage> imgs;
    for (const auto& f : w.users[0].train_db_images) imgs.push_back({f.image, 0, "x", false});
    const Database db = build_db(imgs, *m);
    CHECK(db.model_id == "intruder");
    REQUIRE(db.size() == imgs.size());
    for (std::size_t i = 0; i < imgs.size(); ++i) CHECK(db.entries[i].feature == m->embed(imgs[i].image));
    const auto hits = search(imgs[2].image, *m, db, 1);
    CHECK(cosine_sim(m->embed(imgs[2].image), db.entries[2].feature) == doctest::Approx(hits[0].similarity));
}

TEST_CASE("scenario names round trip") {
    for (auto s : {Scenario::Baseline, Scenario::UnprotQueryProtDb, Scenario::ProtQueryUnprotDb, Scenario::ProtQueryProtDb})
        CHECK(parse_scenario(to_string(s)) == s);
    CHECK(to_string(Scenario::ProtQueryProtDb) == "prot_query/prot_db");
    CHECK_THROWS_AS(parse_scenario("sideways"), ConfigError);
    CHECK(protects_queries(Scenario::ProtQueryUnprotDb));
    CHECK_FALSE(protects_db(Scenario::ProtQueryUnprotDb));
}

TEST_CASE("scenario harness properties") {
    const auto& w = small_world();
    const auto intruder = random_model(Architecture::Conv3, 16, 8, 77, "intruder");
    const PPTMap ppts = random_ppts(w, 3);

    const auto base0 = run_scenario(w, {}, {}, *intruder, Scenario::Baseline, 0.0, 5);
    const auto base1 = run_scenario(w, {}, ppts, *intruder, Scenario::Baseline, 1.0, 5);
    CHECK(base0.per_user_recall == base1.per_user_recall);
    CHECK(base0.per_user_recall.size() == 3u);
    for (const auto& [u, r] : base0.per_user_recall) {
        CHECK(r >= 0.0);
        CHECK(r <= 100.0);
    }

    const auto hard0 = run_scenario(w, {}, ppts, *intruder, Scenario::ProtQueryProtDb, 0.0, 5);
    const auto qonly = run_scenario(w, {}, ppts, *intruder, Scenario::ProtQueryUnprotDb, 0.5, 5);
    CHECK(hard0.per_user_recall == qonly.per_user_recall);

    const auto a = run_scenario(w, {}, ppts, *intruder, Scenario::ProtQueryProtDb, 0.5, 9);
    const auto b = run_scenario(w, {}, ppts, *intruder, Scenario::ProtQueryProtDb, 0.5, 9);
    CHECK(a.to_json() == b.to_json());

    const auto sub = run_scenario(w, {1}, ppts, *intruder, Scenario::UnprotQueryProtDb, 1.0, 9);
    CHECK(sub.per_user_recall.size() == 1u);
    CHECK(sub.per_user_recall.count(1) == 1u);

    const std::vector<ScenarioReport> reports{base0, a};
    const std::string csv = scenario_csv(reports);
    CHECK(csv.rfind("scenario,protected_fraction,model_id,user_id,recall\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
}

TEST_CASE("scenario guards") {
    const auto& w = small_world();
    const auto intruder = random_model(Architecture::Conv3, 16, 8, 77, "ensemble-member");
    const PPTMap ppts = random_ppts(w, 3);
    CHECK_THROWS_AS(run_scenario(w, {}, ppts, *intruder, Scenario::ProtQueryProtDb, 1.0, 1), ConfigError);
    CHECK_NOTHROW(run_scenario(w, {}, ppts, *intruder, Scenario::Baseline, 1.0, 1));
    const auto other = random_model(Architecture::Conv3, 16, 8, 78, "outsider");
    CHECK_THROWS_AS(run_scenario(w, {}, {}, *other, Scenario::UnprotQueryProtDb, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(run_scenario(w, {}, ppts, *other, Scenario::ProtQueryProtDb, 1.5, 1), ConfigError);
    CHECK_THROWS_AS(run_scenario(w, {42}, ppts, *other, Scenario::Baseline, 1.0, 1), ConfigError);
}

TEST_CASE("database persistence") {
    Rng rng(4);
    Database db = random_db(rng, 25, 8);
    db.entries[3].content_ref = "user1/db3";
    db.entries[3].is_protected = true;
    const auto dir = std::filesystem::temp_directory_path() / "protego_test_db";
    std::filesystem::create_directories(dir);
    save_database(db, dir / "db");
    const Database back = load_database(dir / "db");
    CHECK(back.model_id == db.model_id);
    REQUIRE(back.size() == db.size());
    for (std::size_t i = 0; i < db.size(); ++i) {
        CHECK(back.entries[i].entry_id == db.entries[i].entry_id);
        CHECK(back.entries[i].identity_id == db.entries[i].identity_id);
        CHECK(back.entries[i].feature == db.entries[i].feature);
        CHECK(back.entries[i].content_ref == db.entries[i].content_ref);
        CHECK(back.entries[i].is_protected == db.entries[i].is_protected);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("transfer studies") {
    const World w = sample_world(1, 1, 5, 3, testing::small_world(16));
    Ensemble pool;
    for (int i = 0; i < 3; ++i) pool.members.push_back(random_model(Architecture::Conv3, 16, 8, 200 + i, "p" + std::to_string(i)));
    Ensemble holdouts{{random_model(Architecture::Conv4, 16, 8, 300, "h")}};
    PPTTrainSpec spec;
    spec.iterations = 2;
    spec.batch_size = 2;

    CHECK_THROWS_AS(subset_transfer(w, {}, pool, 2, Ensemble{}, spec, 1), ConfigError);
    CHECK_THROWS_AS(subset_transfer(w, {}, pool, 0, holdouts, spec, 1), ConfigError);
    CHECK_THROWS_AS(subset_transfer(w, {}, pool, 4, holdouts, spec, 1), ConfigError);
    Ensemble big;
    for (int i = 0; i < 7; ++i) big.members.push_back(random_model(Architecture::Conv3, 16, 8, 400 + i));
    CHECK_THROWS_AS(subset_transfer(w, {}, big, 2, holdouts, spec, 1), ConfigError);

    const auto teams = subset_transfer(w, {}, pool, 2, holdouts, spec, 1);
    REQUIRE(teams.size() == 3u);
    for (std::size_t i = 1; i < teams.size(); ++i) CHECK(teams[i - 1].mean_recall <= teams[i].mean_recall);
    for (const auto& t : teams) {
        CHECK(t.member_ids.size() == 2u);
        CHECK(t.holdout_recall.count("h") == 1u);
    }

    CHECK_THROWS_AS(leave_one_out(w, {}, Ensemble{{pool.members[0]}}, spec, 1), ConfigError);
    const auto loo = leave_one_out(w, {}, pool, spec, 1);
    REQUIRE(loo.size() == 3u);
    CHECK(loo[0].held_out_id == "p0");
}
