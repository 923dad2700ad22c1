#include <doctest.h>

#include <filesystem>
#include <limits>
#include <set>

#include "helpers.hpp"
#include "oracles.hpp"
#include "protego/ppt_engine.hpp"
#include "protego/ssim.hpp"

using namespace protego;
using testing::random_image;
using testing::random_model;
using testing::random_unit;

namespace {

const World& tiny_world() {
    static const World w = sample_world(2, 0, 10, 21, testing::small_world(16));
    return w;
}

Texture random_texture(int rows, int cols, double eps, Rng& rng) {
    Texture t(rows, cols, 3);
    for (auto& x : t.data) x = rng.uniform(-eps, eps);
    return t;
}

Ensemble tiny_ensemble(int n, int dim) {
    Ensemble e;
    for (int i = 0; i < n; ++i)
        e.members.push_back(random_model(i % 2 ? Architecture::Conv4 : Architecture::Conv3, 16, dim, 40 + i));
    return e;
}

}  // namespace

TEST_CASE("deform of constant and zero textures") {
    const auto& face = tiny_world().users[0].train_db_images[0];
    Texture c(8, 8, 3, 0.037);
    const Image d = deform(c, face.uv);
    for (std::size_t p = 0; p < face.uv.pixel_count(); ++p)
        for (int k = 0; k < 3; ++k) {
            if (face.uv.mask[p]) CHECK(d.data[p * 3 + k] == doctest::Approx(0.037).epsilon(1e-14));
            else CHECK(d.data[p * 3 + k] == 0.0);
        }
    CHECK(max_abs(deform(Texture(8, 8, 3, 0.0), face.uv).data) == 0.0);
    CHECK_THROWS_AS(deform(Texture(1, 8, 3), face.uv), ShapeError);
}

TEST_CASE("deform_backward is the adjoint of deform") {
    Rng rng(5);
    const auto& face = tiny_world().users[0].train_db_images[1];
    const Texture t = random_texture(8, 8, 0.05, rng);
    Image w(16, 16, 3);
    for (auto& x : w.data) x = rng.normal();
    Texture g(8, 8, 3);
    deform_backward(face.uv, w, g);
    auto objective = [&](const Texture& tex) {
        const Image d = deform(tex, face.uv);
        double s = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) s += w.data[i] * d.data[i];
        return s;
    };
    for (int probe = 0; probe < 20; ++probe) {
        const std::size_t i = rng.index(t.size());
        Texture tp = t, tm = t;
        tp.data[i] += 1e-4;
        tm.data[i] -= 1e-4;
        const double fd = (objective(tp) - objective(tm)) / 2e-4;
        CHECK(std::abs(g.data[i] - fd) <= 1e-2 * std::abs(fd) + 1e-9);
    }
}

TEST_CASE("protection stays inside the epsilon bound") {
    Rng rng(77);
    const double eps = 0.063;
    std::vector<const RenderedFace*> faces;
    for (const auto& u : tiny_world().users)
        for (const auto& f : u.train_db_images) faces.push_back(&f);
    for (int t = 0; t < 100; ++t) {
        const auto& face = *faces[rng.index(faces.size())];
        PPT ppt = PPT::zeros(8, 8, 3, eps, 0);
        ppt.texture = random_texture(8, 8, eps, rng);
        if (t % 3 == 0)
            for (auto& x : ppt.texture.data) x = x > 0 ? eps : -eps;
        const Image img = random_image(16, 16, 3, rng);
        const auto res = protect(img, ppt, FixedUVProvider(face.uv));
        for (std::size_t p = 0; p < face.uv.pixel_count(); ++p)
            for (int k = 0; k < 3; ++k) {
                const std::size_t i = p * 3 + k;
                CHECK(std::abs(res.protected_image.data[i] - img.data[i]) <= eps);
                // Equal to the clipped difference up to the rounding of the subtraction.
                CHECK(std::abs(res.protected_image.data[i] - std::clamp(img.data[i] - res.delta.data[i], 0.0, 1.0)) <=
                      std::numeric_limits<double>::epsilon());
                if (!face.uv.mask[p]) CHECK(res.delta.data[i] == 0.0);
            }
    }
}

TEST_CASE("protect edge cases") {
    const auto& face = tiny_world().users[1].query_images[0];
    const FixedUVProvider uv(face.uv);
    const PPT zero = PPT::zeros(8, 8, 3, 0.063, 1);
    CHECK(protect(face.image, zero, uv, "q0").protected_image == face.image);
    CHECK(protect(face.image, zero, uv, "q0").source_ref == "q0");

    PPT full = zero;
    for (auto& x : full.texture.data) x = 0.063;
    const auto res = protect(Image(16, 16, 3, 0.0), full, uv);
    CHECK(max_abs(res.protected_image.data) == 0.0);

    CHECK_THROWS_AS(protect(face.image, zero, FixedUVProvider(UVMap(16, 16))), NoFaceError);
    PPT over = zero;
    over.texture.data[0] = 0.07;
    CHECK_THROWS_AS(over.check_bound(), NumericError);
}

TEST_CASE("protect_sequence is stateless") {
    const auto& u = tiny_world().users[0];
    Rng rng(2);
    PPT ppt = PPT::zeros(8, 8, 3, 0.063, 0);
    ppt.texture = random_texture(8, 8, 0.063, rng);
    GroundTruthUVProvider gt(u.train_db_images);
    const auto& f = u.train_db_images[2];
    const auto single = protect(f.image, ppt, gt);
    const auto one = protect_sequence({f.image}, ppt, gt);
    REQUIRE(one.size() == 1u);
    CHECK(one[0].protected_image == single.protected_image);
    const auto three = protect_sequence({f.image, f.image, f.image}, ppt, gt);
    for (const auto& r : three) CHECK(r.protected_image == single.protected_image);

    try {
        protect_sequence({f.image, Image(16, 16, 3, 0.2)}, ppt, gt);
        FAIL("expected NoFaceError");
    } catch (const NoFaceError& e) {
        CHECK(std::string(e.what()).find("frame 1") != std::string::npos);
    }
}

TEST_CASE("deltas agree in uv space across poses") {
    WorldConfig cfg = testing::small_world(32);
    const auto atlas = make_identity(3, cfg);
    const auto a = render_face(atlas, FacePose(-0.3, 0.1, 0.0, 0.2, 1.0, 0.9), cfg);
    const auto b = render_face(atlas, FacePose(0.4, -0.1, 0.1, 0.6, 0.95, 0.8), cfg);
    Rng rng(1);
    const Texture t = random_texture(32, 32, 0.063, rng);
    // Pull each delta back to its texel cell: it must be the bilinear blend of
    // that cell's four texels, whichever pose produced it.
    std::set<int> cells_a, cells_b;
    auto pull_back = [&](const RenderedFace& f, std::set<int>& cells) {
        const Image d = deform(t, f.uv);
        for (std::size_t p = 0; p < f.uv.pixel_count(); ++p) {
            if (!f.uv.mask[p]) continue;
            const auto cell = oracle::cell_of(t, f.uv.u[p], f.uv.v[p]);
            cells.insert(cell.row * t.cols + cell.col);
            for (int k = 0; k < 3; ++k) CHECK(d.data[p * 3 + k] == oracle::blend(t, cell, k));
        }
    };
    pull_back(a, cells_a);
    pull_back(b, cells_b);
    int shared = 0;
    for (int c : cells_a) shared += static_cast<int>(cells_b.count(c));
    CHECK(shared > 50);
}

TEST_CASE("gram matrix and log-det") {
    Rng rng(12);
    // Orthonormal features.
    std::vector<FeatureVector> basis;
    for (int i = 0; i < 4; ++i) {
        std::vector<double> v(8, 0.0);
        v[i] = 1.0;
        basis.emplace_back(v);
    }
    const auto g = gram_matrix(basis);
    CHECK((g - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(log_det_spd(g) == doctest::Approx(0.0));

    // Duplicate features make the Gram singular.
    const auto f = random_unit(8, rng);
    const auto gd = gram_matrix({f, f});
    CHECK(std::abs(gd.determinant()) < 1e-12);
    CHECK_THROWS_AS(log_det_spd(Eigen::MatrixXd::Zero(2, 2)), NumericError);
    const double collapsed = log_det_spd(gd + 1e-4 * Eigen::MatrixXd::Identity(2, 2));
    CHECK(-collapsed > 8.0);

    // Cofactor oracle.
    for (int t = 0; t < 50; ++t) {
        const int b = 1 + static_cast<int>(rng.index(5));
        std::vector<FeatureVector> fs;
        for (int i = 0; i < b; ++i) fs.push_back(random_unit(32, rng));
        const auto m = gram_matrix(fs);
        std::vector<std::vector<double>> rows(b, std::vector<double>(b));
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < b; ++j) {
                double dot = 0.0;
                for (int k = 0; k < 32; ++k) dot += fs[i].values[k] * fs[j].values[k];
                rows[i][j] = dot;
                CHECK(std::abs(m(i, j) - dot) < 1e-14);
            }
        const double det = oracle::cofactor_det(rows);
        CHECK(std::abs(m.determinant() - det) < 1e-10);
        CHECK(std::abs(std::exp(log_det_spd(m)) - det) < 1e-10);
    }
    CHECK_THROWS_AS(gram_matrix({}), ShapeError);
}

TEST_CASE("perceptual hinge arithmetic") {
    const auto samples = to_samples(sample_world(1, 0, 10, 4, testing::small_world(32)).users[0].train_db_images);
    Rng rng(9);
    const Texture t = random_texture(32, 32, 0.063, rng);
    const std::span<const Sample> batch(samples.data(), 4);
    double drop = 0.0;
    for (const auto& s : batch) drop += (1.0 - ssim(s.image, apply_texture(s.image, t, s.uv))) / 2.0;
    drop /= batch.size();
    REQUIRE(drop > 0.011);

    CHECK(perceptual_loss(batch, Texture(32, 32, 3, 0.0), 0.025, false).breakdown.percept_term == 0.0);
    CHECK(perceptual_loss(batch, t, drop, false).breakdown.percept_term == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(perceptual_loss(batch, t, drop - 0.01, false).breakdown.percept_term - 0.01) < 1e-10);

    const auto inside = perceptual_loss(batch, t, drop + 0.01, true);
    CHECK(inside.breakdown.percept_term == 0.0);
    CHECK(max_abs(inside.gradient.data) == 0.0);
}

TEST_CASE("total loss composes its terms and its gradient matches finite differences") {
    const auto samples = to_samples(tiny_world().users[0].train_db_images);
    const std::span<const Sample> batch(samples.data(), 2);
    const Ensemble ens = tiny_ensemble(1, 8);
    PPTTrainSpec spec;
    spec.omega = 0.0;  // keep the hinge active so every term is exercised
    Rng rng(33);
    const Texture t = random_texture(8, 8, 0.063, rng);
    const double lambda = 1.7;
    const auto lv = total_loss(batch, t, ens, spec, lambda, true);
    const auto& b = lv.breakdown;
    CHECK(std::abs(b.total - (b.protect_logdet_term + b.protect_sim_term + lambda * b.percept_term)) < 1e-10);
    CHECK(b.percept_term > 0.0);
    CHECK(b.lambda_ssim == lambda);

    for (int probe = 0; probe < 10; ++probe) {
        const std::size_t i = rng.index(t.size());
        const double h = 1e-5;
        Texture tp = t, tm = t;
        tp.data[i] += h;
        tm.data[i] -= h;
        const double fd = (total_loss(batch, tp, ens, spec, lambda, false).breakdown.total -
                           total_loss(batch, tm, ens, spec, lambda, false).breakdown.total) /
                          (2 * h);
        CHECK(std::abs(lv.gradient.data[i] - fd) <= 0.02 * std::abs(fd) + 1e-7);
    }
}

TEST_CASE("protection loss with a clean texture has a unit similarity term") {
    const auto samples = to_samples(tiny_world().users[1].train_db_images);
    const std::span<const Sample> batch(samples.data(), 3);
    const Ensemble ens = tiny_ensemble(2, 8);
    PPTTrainSpec spec;
    const auto lv = protection_loss(batch, Texture(8, 8, 3, 0.0), ens, spec, false);
    CHECK(lv.breakdown.protect_sim_term == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(lv.breakdown.protect_logdet_term >= 0.0);  // log det <= 0 for a unit-diagonal Gram
    spec.use_logdet = false;
    CHECK(protection_loss(batch, Texture(8, 8, 3, 0.0), ens, spec, false).breakdown.protect_logdet_term == 0.0);
    CHECK_THROWS_AS(protection_loss(batch.first(1), Texture(8, 8, 3, 0.0), ens, spec, false), ConfigError);
}

TEST_CASE("training respects the bound and a zero step keeps the initial texture") {
    const auto& user = tiny_world().users[0];
    const Ensemble ens = tiny_ensemble(2, 8);
    PPTTrainSpec spec;
    spec.iterations = 25;
    spec.seed = 4;
    const auto run = train_ppt(user, ens, spec);
    REQUIRE(run.log.size() == 25u);
    for (const auto& e : run.log) {
        CHECK(e.max_abs_texture <= spec.epsilon);
        CHECK(e.percept_term >= 0.0);
        CHECK(std::abs(e.total - (e.protect_logdet_term + e.protect_sim_term + e.lambda_ssim * e.percept_term)) < 1e-10);
    }
    CHECK(max_abs(run.ppt.texture.data) <= spec.epsilon);
    CHECK(max_abs(run.ppt.texture.data) > 0.0);
    CHECK(run.ppt.meta.ensemble_ids == ens.ids());

    const auto again = train_ppt(user, ens, spec);
    CHECK(again.ppt.texture == run.ppt.texture);

    spec.step = 0.0;
    const auto still = train_ppt(user, ens, spec);
    CHECK(still.ppt.texture == Texture(16, 16, 3, 0.0));
}

TEST_CASE("lambda schedule follows the percept term") {
    const auto& user = tiny_world().users[1];
    const Ensemble ens = tiny_ensemble(1, 8);
    PPTTrainSpec spec;
    spec.iterations = 30;
    spec.omega = 0.0;
    const auto run = train_ppt(user, ens, spec);
    CHECK(run.log.front().lambda_ssim == 1.0);
    for (std::size_t i = 1; i < run.log.size(); ++i) {
        const double prev = run.log[i - 1].lambda_ssim;
        const double expect = run.log[i - 1].percept_term > 0.0 ? std::min(prev * 1.2, 1e6) : std::max(prev * 0.9, 0.1);
        CHECK(run.log[i].lambda_ssim == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("training spreads the protected features of a user") {
    const WorldConfig cfg;
    const World w = sample_world(1, 0, 10, 8, cfg);
    const auto& user = w.users[0];
    const auto pool = render_identity_pool(900, 20, 10, 5, cfg).faces;
    Ensemble ens;
    for (int i = 0; i < 2; ++i) {
        FRTrainSpec s;
        s.architecture = i ? Architecture::Conv4 : Architecture::Conv3;
        s.loss = LossKind::AngularMargin;
        s.seed = 60 + i;
        s.epochs = 20;
        s.accuracy_floor = 0.0;
        s.verification_triples = 200;
        s.augment = false;
        ens.members.push_back(std::make_shared<FRModel>(train_fr(pool, s)));
    }
    PPTTrainSpec spec;
    spec.iterations = 200;
    const auto run = train_ppt(user, ens, spec);
    auto mean_pair = [](const std::vector<FeatureVector>& fs) {
        double s = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < fs.size(); ++i)
            for (std::size_t j = i + 1; j < fs.size(); ++j, ++n) s += cosine_sim(fs[i], fs[j]);
        return s / n;
    };
    for (const auto& model : ens.members) {
        std::vector<FeatureVector> clean, prot;
        for (const auto& f : user.train_db_images) {
            clean.push_back(model->embed(f.image));
            prot.push_back(model->embed(apply_texture(f.image, run.ppt.texture, f.uv)));
        }
        CHECK(mean_pair(prot) < mean_pair(clean));
        for (std::size_t i = 0; i < clean.size(); ++i) CHECK(cosine_sim(clean[i], prot[i]) < 0.5);
    }
}

TEST_CASE("ppt persistence and training log") {
    Rng rng(3);
    PPT ppt = PPT::zeros(8, 8, 3, 0.05, 7);
    ppt.texture = random_texture(8, 8, 0.05, rng);
    ppt.meta.ensemble_ids = {"a", "b"};
    ppt.meta.iterations = 12;
    ppt.meta.seed = 99;
    const auto dir = std::filesystem::temp_directory_path() / "protego_test_ppt";
    std::filesystem::create_directories(dir);
    save_ppt(ppt, dir / "p");
    const PPT back = load_ppt(dir / "p");
    CHECK(back.texture == ppt.texture);
    CHECK(back.epsilon == 0.05);
    CHECK(back.user_id == 7);
    CHECK(back.meta.ensemble_ids == ppt.meta.ensemble_ids);
    CHECK(back.meta.seed == 99u);
    std::filesystem::remove_all(dir);

    LossBreakdown row;
    row.total = 1.5;
    const std::string csv = training_log_csv({row});
    CHECK(csv.rfind("iteration,protect_logdet_term,protect_sim_term,percept_term,lambda_ssim,total,mean_ssim,max_abs_texture\n", 0) == 0);
}

TEST_CASE("train spec validation") {
    PPTTrainSpec s;
    CHECK(s.eta() == doctest::Approx(0.0063));
    s.batch_size = 1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = PPTTrainSpec{};
    s.epsilon = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = PPTTrainSpec{};
    s.ridge = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}
