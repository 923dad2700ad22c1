#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "helpers.hpp"
#include "protego/experiment.hpp"
#include "protego/io.hpp"

using namespace protego;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_config_json(const fs::path& out) {
    return {{"seed", 5},
            {"output_dir", out.string()},
            {"world", {{"image_size", 16}, {"texture_size", 8}, {"n_users", 2}, {"n_noise", 1}, {"per_identity", 5}}},
            {"fr",
             {{"pool_identities", 4},
              {"pool_per_identity", 6},
              {"feature_dim", 8},
              {"epochs", 2},
              {"accuracy_floor", 0.0},
              {"verification_triples", 50},
              {"roster",
               {{{"name", "a"}, {"architecture", "conv3"}, {"loss", "arcface"}, {"seed", 1}},
                {{"name", "b"}, {"architecture", "conv4"}, {"loss", "arcface"}, {"seed", 2}},
                {{"name", "c"}, {"architecture", "conv3"}, {"loss", "softmax"}, {"seed", 3}}}}}},
            {"ensemble", {"a", "b"}},
            {"intruder", "c"},
            {"ppt", {{"iterations", 3}, {"batch_size", 2}}},
            {"evaluation",
             {{"fractions", {0.0, 1.0}}, {"attacks", {{{"kind", "median"}, {"parameter", 3}}}}}}};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("default config round trips through json") {
    const auto c = ExperimentConfig::defaults();
    CHECK_NOTHROW(c.validate());
    const auto back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(c.ppt.epsilon == 0.063);
    CHECK(c.ppt.eta() == doctest::Approx(0.0063));
    CHECK(c.ppt.omega == 0.025);
    CHECK(c.ppt.batch_size == 4);
    CHECK(c.fractions == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
}

TEST_CASE("config hash ignores output_dir and tracks everything else") {
    auto a = ExperimentConfig::defaults();
    auto b = a;
    b.output_dir = "elsewhere";
    CHECK(a.hash() == b.hash());
    b.seed = 99;
    CHECK(a.hash() != b.hash());
    CHECK(a.world_seed() != a.pool_seed());
}

TEST_CASE("config errors") {
    auto j = tiny_config_json("x");
    j["bogus"] = 1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    j = tiny_config_json("x");
    j["ppt"]["epsilon_typo"] = 0.1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    j = tiny_config_json("x");
    j["intruder"] = "a";
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    j = tiny_config_json("x");
    j["ensemble"] = {"a", "zzz"};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    j = tiny_config_json("x");
    j["evaluation"]["fractions"] = {0.5, 1.5};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("mean pairwise cosine") {
    Rng rng(1);
    const auto a = testing::random_unit(4, rng), b = testing::random_unit(4, rng), c = testing::random_unit(4, rng);
    CHECK(mean_pairwise_cosine({a, b, c}) ==
          doctest::Approx((cosine_sim(a, b) + cosine_sim(a, c) + cosine_sim(b, c)) / 3.0));
    CHECK_THROWS_AS(mean_pairwise_cosine({a}), UndefinedMetricError);
}

TEST_CASE("commands check their inputs") {
    TempDir dir("protego_test_cmd_guard");
    const auto ctx = make_context(ExperimentConfig::from_json(tiny_config_json(dir.path)), false, nullptr);
    CHECK_THROWS_AS(cmd_train_fr(ctx), DependencyError);
    CHECK_THROWS_AS(cmd_train_ppt(ctx, std::nullopt), DependencyError);
    CHECK_THROWS_AS(cmd_evaluate(ctx, std::nullopt, std::nullopt), DependencyError);

    cmd_gen_world(ctx);
    CHECK(fs::exists(ctx.layout.world() / "manifest.json"));
    CHECK_THROWS_AS(cmd_gen_world(ctx), ConfigError);
    const auto again = make_context(ctx.config, true, nullptr);
    CHECK_NOTHROW(cmd_gen_world(again));

    // A different config must not silently reuse this world.
    auto other = ctx.config;
    other.seed = 6;
    CHECK_THROWS_AS(load_world(ctx.layout.world(), other.world, other.hash()), ConsistencyError);

    const World w = load_world(ctx.layout.world(), ctx.config.world, ctx.config.hash());
    WorldConfig wc = ctx.config.world;
    wc.seed = ctx.config.world_seed();
    const World ref = sample_world(wc);
    REQUIRE(w.users.size() == ref.users.size());
    for (std::size_t u = 0; u < w.users.size(); ++u)
        for (std::size_t i = 0; i < ref.users[u].query_images.size(); ++i) {
            const auto& a = w.users[u].query_images[i];
            const auto& b = ref.users[u].query_images[i];
            CHECK(max_abs_diff(a.image, b.image) <= 0.5 / 255.0 + 1e-12);
            CHECK(a.uv.mask == b.uv.mask);
            CHECK(a.identity_id == b.identity_id);
        }
}

TEST_CASE("tiny pipeline end to end") {
    TempDir dir("protego_test_pipeline");
    const auto ctx = make_context(ExperimentConfig::from_json(tiny_config_json(dir.path)), false, nullptr);
    cmd_gen_world(ctx);
    cmd_train_fr(ctx);
    for (const char* m : {"a", "b", "c"}) CHECK(fs::exists(ctx.layout.models() / (std::string(m) + ".bin")));
    cmd_train_ppt(ctx, std::nullopt);
    const PPT p0 = load_ppt(ctx.layout.ppts() / "user_0");
    CHECK(max_abs(p0.texture.data) <= 0.063);
    CHECK(p0.meta.ensemble_ids == std::vector<std::string>{"a", "b"});

    cmd_evaluate(ctx, std::nullopt, std::nullopt);
    const auto report = io::read_text(ctx.layout.reports() / "evaluate.csv");
    CHECK(report.rfind("scenario,protected_fraction,model_id,user_id,recall\n", 0) == 0);
    cmd_evaluate(ctx, std::nullopt, std::nullopt);
    CHECK(io::read_text(ctx.layout.reports() / "evaluate.csv") == report);

    cmd_attack_eval(ctx);
    CHECK(fs::exists(ctx.layout.reports() / "attack_eval.json"));
    cmd_ablate(ctx);
    const auto abl = io::read_json(ctx.layout.reports() / "ablation.json");
    CHECK(abl.contains("pairwise_cosine"));

    // Protect a rendered query through the command layer.
    const World w = load_world(ctx.layout.world(), ctx.config.world, ctx.config.hash());
    const fs::path in = dir.path / "q.png", out = dir.path / "q_prot.png";
    io::write_png(in, w.users[0].query_images[0].image);
    std::ostringstream log;
    cmd_protect(&ctx, in, ctx.layout.ppts() / "user_0", out, std::nullopt, log);
    const Image prot = io::read_png(out);
    CHECK(max_abs_diff(prot, io::read_png(in)) <= 0.063 + 1.0 / 255.0);
    CHECK(log.str().find("ms") != std::string::npos);
}
