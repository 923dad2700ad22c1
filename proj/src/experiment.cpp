#include "protego/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>

#include "protego/io.hpp"
#include "protego/plot.hpp"

namespace protego {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kManifestVersion = 1;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

std::string fraction_tag(double f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", f);
    return buf;
}

std::string slug(Scenario s) {
    std::string out = to_string(s);
    std::replace(out.begin(), out.end(), '/', '-');
    return out;
}

struct NullBuffer : std::streambuf {
    int overflow(int c) override { return c; }
};

std::ostream& logger(const CommandContext& ctx) {
    static NullBuffer buffer;
    static std::ostream null_stream(&buffer);
    return ctx.log ? *ctx.log : null_stream;
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw DependencyError("missing " + what + ": " + p.string());
}

void check_hash(const json& sidecar, const std::string& expected, const fs::path& where) {
    const std::string got = sidecar.value("config_hash", "");
    if (got != expected)
        throw ConsistencyError(where.string() + " was produced with a different configuration (hash " + got +
                               ", expected " + expected + ")");
}

void stamp_sidecar(const fs::path& json_path, const std::string& hash) {
    json j = io::read_json(json_path);
    j["config_hash"] = hash;
    io::write_json(json_path, j);
}

json with_hash(json j, const std::string& hash) {
    j["config_hash"] = hash;
    return j;
}

void write_plot_sidecar(const fs::path& png, const std::string& hash, const json& data) {
    json j;
    j["config_hash"] = hash;
    j["data"] = data;
    io::write_json(png.string() + ".json", j);
}

World require_world(const CommandContext& ctx) {
    require_file(ctx.layout.world() / "manifest.json", "dataset (run gen-world first)");
    WorldConfig wc = ctx.config.world;
    wc.seed = ctx.config.world_seed();
    return load_world(ctx.layout.world(), wc, ctx.config.hash());
}

ModelPtr require_model(const CommandContext& ctx, const std::string& name) {
    const fs::path stem = ctx.layout.models() / name;
    require_file(stem.string() + ".json", "model checkpoint '" + name + "' (run train-fr first)");
    check_hash(io::read_json(stem.string() + ".json"), ctx.config.hash(), stem.string() + ".json");
    return std::make_shared<FRModel>(load_model(stem));
}

Ensemble require_ensemble(const CommandContext& ctx) {
    Ensemble e;
    for (const auto& name : ctx.config.ensemble) e.members.push_back(require_model(ctx, name));
    e.validate(true);
    return e;
}

fs::path ppt_stem(const fs::path& dir, int user) { return dir / ("user_" + std::to_string(user)); }

PPTMap require_ppts(const CommandContext& ctx, const World& world, const fs::path& dir) {
    PPTMap out;
    for (const auto& u : world.users) {
        const fs::path stem = ppt_stem(dir, u.user_id);
        require_file(stem.string() + ".json", "PPT for user " + std::to_string(u.user_id) + " (run train-ppt first)");
        check_hash(io::read_json(stem.string() + ".json"), ctx.config.hash(), stem.string() + ".json");
        out.emplace(u.user_id, load_ppt(stem));
    }
    return out;
}

const UserSplit& find_user(const World& world, int id) {
    for (const auto& u : world.users)
        if (u.user_id == id) return u;
    throw ConfigError("unknown user id " + std::to_string(id));
}

PPTTrainingResult train_one(const CommandContext& ctx, const World& world, const Ensemble& ensemble, int user,
                            const PPTTrainSpec& spec) {
    PPTTrainSpec s = spec;
    s.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(user));
    const int t = ctx.config.world.texture_size;
    return train_ppt(to_samples(find_user(world, user).train_db_images), user, ensemble, s, t, t);
}

void save_trained(const CommandContext& ctx, const fs::path& dir, int user, const PPTTrainingResult& res,
                  const std::string& tag) {
    fs::create_directories(dir);
    fs::create_directories(ctx.layout.plots());
    const std::string hash = ctx.config.hash();
    const fs::path stem = ppt_stem(dir, user);
    save_ppt(res.ppt, stem);
    stamp_sidecar(stem.string() + ".json", hash);
    io::write_text(stem.string() + "_log.csv", training_log_csv(res.log));

    plot::Series total{"total", {}, {}}, protect{"protect", {}, {}}, percept{"percept", {}, {}};
    for (std::size_t i = 0; i < res.log.size(); ++i) {
        const double x = static_cast<double>(i);
        total.x.push_back(x);
        total.y.push_back(res.log[i].total);
        protect.x.push_back(x);
        protect.y.push_back(res.log[i].protect_logdet_term + res.log[i].protect_sim_term);
        percept.x.push_back(x);
        percept.y.push_back(res.log[i].percept_term);
    }
    const fs::path png = ctx.layout.plots() / ("loss_" + tag + "user_" + std::to_string(user) + ".png");
    plot::write_line_chart(png, {total, protect, percept});
    const std::string source = fs::relative(stem.string() + "_log.csv", ctx.layout.root).generic_string();
    write_plot_sidecar(png, hash, {{"source", source}, {"series", {"total", "protect", "percept"}}});
}

void write_report_pair(const CommandContext& ctx, const std::string& name, const json& doc, const std::string& csv) {
    fs::create_directories(ctx.layout.reports());
    io::write_json(ctx.layout.reports() / (name + ".json"), with_hash(doc, ctx.config.hash()));
    if (!csv.empty()) io::write_text(ctx.layout.reports() / (name + ".csv"), csv);
}

std::vector<FeatureVector> user_features(const FRModel& model, const UserSplit& u, const PPT* ppt) {
    std::vector<FeatureVector> out;
    for (const auto* list : {&u.train_db_images, &u.unseen_db_images})
        for (const auto& f : *list)
            out.push_back(model.embed(ppt ? apply_texture(f.image, ppt->texture, f.uv) : f.image));
    return out;
}

}  // namespace

// ---------------------------------------------------------------- config

const RosterEntry& ExperimentConfig::roster_entry(const std::string& name) const {
    for (const auto& r : roster)
        if (r.name == name) return r;
    throw ConfigError("model '" + name + "' is not in the roster");
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    c.fr.epochs = 20;
    c.fr.augment = false;
    c.roster = {{"conv4-arcface-s2", Architecture::Conv4, LossKind::AngularMargin, 2},
                {"conv3-arcface-s3", Architecture::Conv3, LossKind::AngularMargin, 3},
                {"conv4-arcface-s5", Architecture::Conv4, LossKind::AngularMargin, 5},
                {"conv3-arcface-s6", Architecture::Conv3, LossKind::AngularMargin, 6},
                {"conv3-softmax-s1", Architecture::Conv3, LossKind::Softmax, 1},
                {"conv4-softmax-s4", Architecture::Conv4, LossKind::Softmax, 4}};
    c.ensemble = {"conv3-arcface-s3", "conv4-arcface-s5", "conv3-arcface-s6"};
    c.intruder = "conv4-arcface-s2";
    c.scenarios = {Scenario::Baseline, Scenario::UnprotQueryProtDb, Scenario::ProtQueryUnprotDb,
                   Scenario::ProtQueryProtDb};
    c.fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
    c.attacks = default_attacks();
    return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c = defaults();
    check_keys(j, {"format_version", "seed", "output_dir", "world", "fr", "ensemble", "intruder", "ppt", "evaluation"},
               "config");
    if (j.contains("format_version") && j.at("format_version") != kFormatVersion)
        throw FormatError("config format_version " + j.at("format_version").dump() + " is not supported");
    read_opt(j, "seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();

    if (j.contains("world")) {
        const json& w = j.at("world");
        check_keys(w,
                   {"image_size", "texture_size", "channels", "n_users", "n_noise", "per_identity", "yaw_max",
                    "pitch_max", "roll_max", "expression_min", "expression_max", "scale_min", "scale_max",
                    "lighting_min", "lighting_max"},
                   "world");
        WorldConfig& wc = c.world;
        read_opt(w, "image_size", wc.image_size);
        read_opt(w, "texture_size", wc.texture_size);
        read_opt(w, "channels", wc.channels);
        read_opt(w, "n_users", wc.n_users);
        read_opt(w, "n_noise", wc.n_noise);
        read_opt(w, "per_identity", wc.per_identity);
        read_opt(w, "yaw_max", wc.yaw_max);
        read_opt(w, "pitch_max", wc.pitch_max);
        read_opt(w, "roll_max", wc.roll_max);
        read_opt(w, "expression_min", wc.expression_min);
        read_opt(w, "expression_max", wc.expression_max);
        read_opt(w, "scale_min", wc.scale_min);
        read_opt(w, "scale_max", wc.scale_max);
        read_opt(w, "lighting_min", wc.lighting_min);
        read_opt(w, "lighting_max", wc.lighting_max);
    }
    if (j.contains("fr")) {
        const json& f = j.at("fr");
        check_keys(f,
                   {"pool_identities", "pool_per_identity", "feature_dim", "epochs", "batch_size", "learning_rate",
                    "margin", "scale", "holdout_fraction", "accuracy_floor", "verification_triples", "augment",
                    "noise_sigma", "blur_probability", "blur_sigma_max", "roster"},
                   "fr");
        read_opt(f, "pool_identities", c.pool_identities);
        read_opt(f, "pool_per_identity", c.pool_per_identity);
        read_opt(f, "feature_dim", c.fr.feature_dim);
        read_opt(f, "epochs", c.fr.epochs);
        read_opt(f, "batch_size", c.fr.batch_size);
        read_opt(f, "learning_rate", c.fr.learning_rate);
        read_opt(f, "margin", c.fr.margin);
        read_opt(f, "scale", c.fr.scale);
        read_opt(f, "holdout_fraction", c.fr.holdout_fraction);
        read_opt(f, "accuracy_floor", c.fr.accuracy_floor);
        read_opt(f, "verification_triples", c.fr.verification_triples);
        read_opt(f, "augment", c.fr.augment);
        read_opt(f, "noise_sigma", c.fr.noise_sigma);
        read_opt(f, "blur_probability", c.fr.blur_probability);
        read_opt(f, "blur_sigma_max", c.fr.blur_sigma_max);
        if (f.contains("roster")) {
            c.roster.clear();
            for (const auto& r : f.at("roster")) {
                check_keys(r, {"name", "architecture", "loss", "seed"}, "roster entry");
                RosterEntry e;
                e.name = r.at("name").get<std::string>();
                e.architecture = nn::parse_architecture(r.at("architecture").get<std::string>());
                e.loss = parse_loss(r.at("loss").get<std::string>());
                e.seed = r.at("seed").get<std::uint64_t>();
                c.roster.push_back(e);
            }
        }
    }
    if (j.contains("ensemble")) c.ensemble = j.at("ensemble").get<std::vector<std::string>>();
    read_opt(j, "intruder", c.intruder);

    if (j.contains("ppt")) {
        const json& p = j.at("ppt");
        check_keys(p,
                   {"epsilon", "step", "omega", "batch_size", "iterations", "ridge", "lambda_init", "lambda_up",
                    "lambda_down", "lambda_max", "lambda_min"},
                   "ppt");
        read_opt(p, "epsilon", c.ppt.epsilon);
        if (p.contains("step") && !p.at("step").is_null()) c.ppt.step = p.at("step").get<double>();
        read_opt(p, "omega", c.ppt.omega);
        read_opt(p, "batch_size", c.ppt.batch_size);
        read_opt(p, "iterations", c.ppt.iterations);
        read_opt(p, "ridge", c.ppt.ridge);
        read_opt(p, "lambda_init", c.ppt.lambda_init);
        read_opt(p, "lambda_up", c.ppt.lambda_up);
        read_opt(p, "lambda_down", c.ppt.lambda_down);
        read_opt(p, "lambda_max", c.ppt.lambda_max);
        read_opt(p, "lambda_min", c.ppt.lambda_min);
    }
    if (j.contains("evaluation")) {
        const json& e = j.at("evaluation");
        check_keys(e, {"scenarios", "fractions", "attacks"}, "evaluation");
        if (e.contains("scenarios")) {
            c.scenarios.clear();
            for (const auto& s : e.at("scenarios")) c.scenarios.push_back(parse_scenario(s.get<std::string>()));
        }
        if (e.contains("fractions")) c.fractions = e.at("fractions").get<std::vector<double>>();
        if (e.contains("attacks")) {
            c.attacks.clear();
            for (const auto& a : e.at("attacks")) {
                check_keys(a, {"kind", "parameter"}, "attack");
                c.attacks.push_back({parse_attack_kind(a.at("kind").get<std::string>()), a.at("parameter").get<double>()});
            }
        }
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    try {
        return from_json(io::read_json(path));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

json ExperimentConfig::to_json() const {
    json j;
    j["format_version"] = kFormatVersion;
    j["seed"] = seed;
    j["output_dir"] = output_dir.string();
    const WorldConfig& w = world;
    j["world"] = {{"image_size", w.image_size},       {"texture_size", w.texture_size},
                  {"channels", w.channels},           {"n_users", w.n_users},
                  {"n_noise", w.n_noise},             {"per_identity", w.per_identity},
                  {"yaw_max", w.yaw_max},             {"pitch_max", w.pitch_max},
                  {"roll_max", w.roll_max},           {"expression_min", w.expression_min},
                  {"expression_max", w.expression_max}, {"scale_min", w.scale_min},
                  {"scale_max", w.scale_max},         {"lighting_min", w.lighting_min},
                  {"lighting_max", w.lighting_max}};
    json roster_json = json::array();
    for (const auto& r : roster)
        roster_json.push_back({{"name", r.name},
                               {"architecture", nn::to_string(r.architecture)},
                               {"loss", protego::to_string(r.loss)},
                               {"seed", r.seed}});
    j["fr"] = {{"pool_identities", pool_identities},
               {"pool_per_identity", pool_per_identity},
               {"feature_dim", fr.feature_dim},
               {"epochs", fr.epochs},
               {"batch_size", fr.batch_size},
               {"learning_rate", fr.learning_rate},
               {"margin", fr.margin},
               {"scale", fr.scale},
               {"holdout_fraction", fr.holdout_fraction},
               {"accuracy_floor", fr.accuracy_floor},
               {"verification_triples", fr.verification_triples},
               {"augment", fr.augment},
               {"noise_sigma", fr.noise_sigma},
               {"blur_probability", fr.blur_probability},
               {"blur_sigma_max", fr.blur_sigma_max},
               {"roster", roster_json}};
    j["ensemble"] = ensemble;
    j["intruder"] = intruder;
    j["ppt"] = {{"epsilon", ppt.epsilon},
                {"step", ppt.step < 0 ? json(nullptr) : json(ppt.step)},
                {"omega", ppt.omega},
                {"batch_size", ppt.batch_size},
                {"iterations", ppt.iterations},
                {"ridge", ppt.ridge},
                {"lambda_init", ppt.lambda_init},
                {"lambda_up", ppt.lambda_up},
                {"lambda_down", ppt.lambda_down},
                {"lambda_max", ppt.lambda_max},
                {"lambda_min", ppt.lambda_min}};
    json sc = json::array();
    for (auto s : scenarios) sc.push_back(protego::to_string(s));
    json at = json::array();
    for (const auto& a : attacks) at.push_back({{"kind", protego::to_string(a.kind)}, {"parameter", a.parameter}});
    j["evaluation"] = {{"scenarios", sc}, {"fractions", fractions}, {"attacks", at}};
    return j;
}

void ExperimentConfig::validate() const {
    WorldConfig wc = world;
    wc.validate();
    if (pool_identities < 2 || pool_per_identity < 2)
        throw ConfigError("fr: pool needs at least 2 identities with 2 images each");
    if (fr.epochs < 1 || fr.batch_size < 1 || !(fr.learning_rate > 0.0) || fr.feature_dim < 2)
        throw ConfigError("fr: invalid training hyper-parameters");
    std::set<std::string> names;
    for (const auto& r : roster) {
        if (r.name.empty() || r.name.find_first_of("/\\ ") != std::string::npos)
            throw ConfigError("roster: invalid model name '" + r.name + "'");
        if (!names.insert(r.name).second) throw ConfigError("roster: duplicate model name '" + r.name + "'");
    }
    if (ensemble.empty()) throw ConfigError("ensemble must not be empty");
    for (const auto& e : ensemble) roster_entry(e);
    if (std::set<std::string>(ensemble.begin(), ensemble.end()).size() != ensemble.size())
        throw ConfigError("ensemble lists a model twice");
    roster_entry(intruder);
    if (std::find(ensemble.begin(), ensemble.end(), intruder) != ensemble.end())
        throw ConfigError("intruder '" + intruder + "' must not be an ensemble member");
    ppt.validate();
    for (double f : fractions)
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("evaluation: fractions must lie in [0,1]");
    for (const auto& a : attacks) a.validate();
}

std::string ExperimentConfig::hash() const {
    json j = to_json();
    j.erase("output_dir");
    return io::fnv1a_hex(j.dump());
}

// ---------------------------------------------------------------- world io

void save_world(const World& world, const fs::path& dir, const std::string& config_hash) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "uv");
    json entries = json::array();
    auto add = [&](const RenderedFace& f, const std::string& name, int user, const std::string& split) {
        const std::string img = "images/" + name + ".png";
        const std::string uv = "uv/" + name + ".png";
        io::write_png(dir / img, f.image);
        io::write_uv_png(dir / uv, f.uv);
        entries.push_back({{"image", img},
                           {"uv", uv},
                           {"identity_id", f.identity_id},
                           {"user_id", user},
                           {"split", split},
                           {"pose",
                            {{"yaw", f.pose.yaw},
                             {"pitch", f.pose.pitch},
                             {"roll", f.pose.roll},
                             {"expression", f.pose.expression},
                             {"scale", f.pose.scale},
                             {"lighting", f.pose.lighting}}}});
    };
    for (const auto& u : world.users) {
        const std::string base = "user" + std::to_string(u.user_id) + "_";
        for (std::size_t i = 0; i < u.query_images.size(); ++i)
            add(u.query_images[i], base + "query" + std::to_string(i), u.user_id, "query");
        for (std::size_t i = 0; i < u.train_db_images.size(); ++i)
            add(u.train_db_images[i], base + "train" + std::to_string(i), u.user_id, "train_db");
        for (std::size_t i = 0; i < u.unseen_db_images.size(); ++i)
            add(u.unseen_db_images[i], base + "unseen" + std::to_string(i), u.user_id, "unseen_db");
    }
    for (std::size_t i = 0; i < world.noise_db_images.size(); ++i) {
        const auto& f = world.noise_db_images[i];
        add(f, "noise" + std::to_string(f.identity_id) + "_" + std::to_string(i), -1, "noise");
    }
    json manifest;
    manifest["format"] = "protego-world";
    manifest["format_version"] = kManifestVersion;
    manifest["config_hash"] = config_hash;
    manifest["n_users"] = world.users.size();
    manifest["n_noise_images"] = world.noise_db_images.size();
    manifest["entries"] = entries;
    io::write_json(dir / "manifest.json", manifest);
}

World load_world(const fs::path& dir, const WorldConfig& config, const std::string& config_hash) {
    const json manifest = io::read_json(dir / "manifest.json");
    if (manifest.value("format", "") != "protego-world" || manifest.value("format_version", 0u) != kManifestVersion)
        throw FormatError((dir / "manifest.json").string() + ": unsupported dataset format or version");
    check_hash(manifest, config_hash, dir / "manifest.json");
    World world;
    world.config = config;
    std::map<int, UserSplit> users;
    for (const auto& e : manifest.at("entries")) {
        RenderedFace f;
        f.image = io::read_png(dir / e.at("image").get<std::string>());
        f.uv = io::read_uv_png(dir / e.at("uv").get<std::string>());
        f.identity_id = e.at("identity_id");
        const auto& p = e.at("pose");
        f.pose = FacePose(p.at("yaw"), p.at("pitch"), p.at("roll"), p.at("expression"), p.at("scale"),
                          p.at("lighting"));
        const std::string split = e.at("split");
        const int user = e.at("user_id");
        if (split == "noise") {
            world.noise_db_images.push_back(std::move(f));
            continue;
        }
        UserSplit& u = users[user];
        u.user_id = user;
        if (split == "query") u.query_images.push_back(std::move(f));
        else if (split == "train_db") u.train_db_images.push_back(std::move(f));
        else if (split == "unseen_db") u.unseen_db_images.push_back(std::move(f));
        else throw FormatError("manifest: unknown split '" + split + "'");
    }
    for (auto& [id, u] : users) world.users.push_back(std::move(u));
    return world;
}

// ---------------------------------------------------------------- commands

CommandContext make_context(ExperimentConfig config, bool overwrite, std::ostream* log) {
    config.validate();
    CommandContext ctx;
    ctx.layout.root = config.output_dir;
    ctx.config = std::move(config);
    ctx.overwrite = overwrite;
    ctx.log = log;
    return ctx;
}

double mean_pairwise_cosine(const std::vector<FeatureVector>& features) {
    if (features.size() < 2) throw UndefinedMetricError("mean_pairwise_cosine needs at least two features");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < features.size(); ++i)
        for (std::size_t j = i + 1; j < features.size(); ++j, ++n) sum += cosine_sim(features[i], features[j]);
    return sum / static_cast<double>(n);
}

void cmd_gen_world(const CommandContext& ctx) {
    const fs::path dir = ctx.layout.world();
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!ctx.overwrite)
            throw ConfigError("output directory " + dir.string() + " is not empty; pass --overwrite to replace it");
        fs::remove_all(dir);
    }
    WorldConfig wc = ctx.config.world;
    wc.seed = ctx.config.world_seed();
    const World world = sample_world(wc);
    save_world(world, dir, ctx.config.hash());
    logger(ctx) << "gen-world: " << world.users.size() << " users, " << world.noise_db_images.size()
                << " noise images -> " << dir.string() << "\n";
}

void cmd_train_fr(const CommandContext& ctx) {
    const World world = require_world(ctx);
    WorldConfig wc = ctx.config.world;
    const LabeledFaces pool = render_identity_pool(1000000, ctx.config.pool_identities, ctx.config.pool_per_identity,
                                                   ctx.config.pool_seed(), wc);
    std::vector<RenderedFace> user_faces;
    for (const auto& u : world.users)
        for (const auto* list : {&u.query_images, &u.train_db_images, &u.unseen_db_images})
            user_faces.insert(user_faces.end(), list->begin(), list->end());
    user_faces.insert(user_faces.end(), world.noise_db_images.begin(), world.noise_db_images.end());

    fs::create_directories(ctx.layout.models());
    json accuracy = json::object();
    for (const auto& r : ctx.config.roster) {
        FRTrainSpec spec = ctx.config.fr;
        spec.architecture = r.architecture;
        spec.loss = r.loss;
        spec.seed = ctx.config.model_seed(r);
        spec.name = r.name;
        spec.feature_dim = ctx.config.fr.feature_dim;
        const FRModel model = train_fr(pool.faces, spec);
        const fs::path stem = ctx.layout.models() / r.name;
        save_model(model, stem);
        stamp_sidecar(stem.string() + ".json", ctx.config.hash());
        const double world_acc =
            verification_accuracy(model, user_faces, user_faces, ctx.config.fr.verification_triples,
                                  derive_seed(spec.seed, 77));
        accuracy[r.name] = {{"holdout_accuracy", model.accuracy()}, {"world_verification_accuracy", world_acc}};
        logger(ctx) << "train-fr: " << r.name << " holdout " << model.accuracy() << " world " << world_acc << "\n";
    }
    io::write_json(ctx.layout.models() / "accuracy.json", with_hash({{"models", accuracy}}, ctx.config.hash()));
}

void cmd_train_ppt(const CommandContext& ctx, std::optional<int> user) {
    const World world = require_world(ctx);
    const Ensemble ensemble = require_ensemble(ctx);
    PPTTrainSpec spec = ctx.config.ppt;
    spec.seed = ctx.config.ppt_seed();
    std::vector<int> ids;
    if (user) ids.push_back(find_user(world, *user).user_id);
    else
        for (const auto& u : world.users) ids.push_back(u.user_id);
    for (int id : ids) {
        const PPTTrainingResult res = train_one(ctx, world, ensemble, id, spec);
        save_trained(ctx, ctx.layout.ppts(), id, res, "");
        const auto& last = res.log.empty() ? LossBreakdown{} : res.log.back();
        logger(ctx) << "train-ppt: user " << id << " final loss " << last.total << " ssim " << last.mean_ssim << "\n";
    }
}

void cmd_protect(const CommandContext* ctx, const fs::path& in, const fs::path& ppt_path, const fs::path& out,
                 const std::optional<fs::path>& uv_path, std::ostream& log) {
    fs::path stem = ppt_path;
    if (stem.extension() == ".json" || stem.extension() == ".bin") stem.replace_extension();
    require_file(stem.string() + ".json", "PPT");
    const PPT ppt = load_ppt(stem);

    std::vector<fs::path> inputs;
    const bool dir_mode = fs::is_directory(in);
    if (dir_mode) {
        for (const auto& e : fs::directory_iterator(in))
            if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
        std::sort(inputs.begin(), inputs.end());
        if (inputs.empty()) throw ConfigError("no PNG frames in " + in.string());
        fs::create_directories(out);
    } else {
        require_file(in, "input image");
        inputs.push_back(in);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
    }

    std::unique_ptr<UVProvider> world_provider;
    auto provider_for = [&](const fs::path& input) -> std::unique_ptr<UVProvider> {
        if (uv_path) {
            const fs::path p = fs::is_directory(*uv_path) ? *uv_path / input.filename() : *uv_path;
            require_file(p, "UV map");
            return std::make_unique<FixedUVProvider>(io::read_uv_png(p));
        }
        return nullptr;
    };
    if (!uv_path) {
        if (!ctx) throw ConfigError("protect: pass --uv or --config so UV maps can be resolved");
        const World world = require_world(*ctx);
        auto gt = std::make_unique<GroundTruthUVProvider>();
        for (const auto& u : world.users)
            for (const auto* list : {&u.query_images, &u.train_db_images, &u.unseen_db_images})
                for (const auto& f : *list) gt->add(f.image, f.uv);
        for (const auto& f : world.noise_db_images) gt->add(f.image, f.uv);
        world_provider = std::move(gt);
    }

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Image image = io::read_png(inputs[k]);
        const auto own = provider_for(inputs[k]);
        const UVProvider& provider = own ? *own : *world_provider;
        const auto t0 = std::chrono::steady_clock::now();
        ProtectionResult res;
        try {
            res = protect(image, ppt, provider, inputs[k].filename().string());
        } catch (const NoFaceError& e) {
            throw NoFaceError(dir_mode ? "frame " + std::to_string(k) + " (" + inputs[k].filename().string() + "): " + e.what()
                                       : std::string(e.what()));
        }
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        const fs::path target = dir_mode ? out / inputs[k].filename() : out;
        io::write_png(target, res.protected_image);
        log << "protect: " << inputs[k].filename().string() << " -> " << target.string() << " (" << ms << " ms)\n";
    }
}

void cmd_evaluate(const CommandContext& ctx, std::optional<Scenario> scenario, std::optional<double> fraction) {
    const World world = require_world(ctx);
    const ModelPtr intruder = require_model(ctx, ctx.config.intruder);
    std::vector<Scenario> scenarios = scenario ? std::vector<Scenario>{*scenario} : ctx.config.scenarios;
    std::vector<double> fractions = fraction ? std::vector<double>{*fraction} : ctx.config.fractions;
    const bool needs_ppts = std::any_of(scenarios.begin(), scenarios.end(), [](Scenario s) {
        return protects_queries(s) || protects_db(s);
    });
    const PPTMap ppts = needs_ppts ? require_ppts(ctx, world, ctx.layout.ppts()) : PPTMap{};
    const std::uint64_t seed = ctx.config.eval_seed();

    std::vector<ScenarioReport> reports;
    reports.push_back(run_scenario(world, {}, {}, *intruder, Scenario::Baseline, 0.0, seed));
    for (Scenario s : scenarios) {
        if (s == Scenario::Baseline) continue;
        for (double f : fractions) {
            // Fractions only act on the DB side; query-only protection is run once.
            if (!protects_db(s) && f != fractions.front()) continue;
            reports.push_back(run_scenario(world, {}, ppts, *intruder, s, protects_db(s) ? f : 1.0, seed));
            logger(ctx) << "evaluate: " << to_string(s) << " fraction " << reports.back().protected_fraction
                        << " mean recall " << reports.back().mean_recall << "\n";
        }
    }
    logger(ctx) << "evaluate: baseline mean recall " << reports.front().mean_recall << "\n";

    json doc;
    doc["intruder"] = intruder->id();
    doc["reports"] = json::array();
    for (const auto& r : reports) doc["reports"].push_back(r.to_json());
    std::string name = "evaluate";
    if (scenario || fraction) {
        name += scenario ? "_" + slug(*scenario) : "";
        name += fraction ? "_f" + fraction_tag(*fraction) : "";
    }
    write_report_pair(ctx, name, doc, scenario_csv(reports));

    // Recall against protected fraction for every DB-protecting scenario.
    fs::create_directories(ctx.layout.plots());
    std::vector<plot::Series> series;
    json plotted = json::array();
    for (Scenario s : scenarios) {
        if (!protects_db(s)) continue;
        plot::Series line{to_string(s), {}, {}};
        for (const auto& r : reports)
            if (r.scenario == s) {
                line.x.push_back(r.protected_fraction);
                line.y.push_back(r.mean_recall);
            }
        plotted.push_back({{"label", line.label}, {"x", line.x}, {"y", line.y}});
        series.push_back(std::move(line));
    }
    if (!series.empty()) {
        const fs::path png = ctx.layout.plots() / (name + "_fraction.png");
        plot::write_line_chart(png, series);
        write_plot_sidecar(png, ctx.config.hash(), plotted);
    }
    const ScenarioReport& last = reports.back();
    std::vector<double> per_user;
    json users = json::object();
    for (const auto& [u, r] : last.per_user_recall) {
        per_user.push_back(r);
        users[std::to_string(u)] = r;
    }
    const fs::path png = ctx.layout.plots() / (name + "_per_user.png");
    plot::write_bar_chart(png, per_user);
    write_plot_sidecar(png, ctx.config.hash(),
                       {{"scenario", to_string(last.scenario)}, {"fraction", last.protected_fraction}, {"recall", users}});
}

void cmd_attack_eval(const CommandContext& ctx) {
    const World world = require_world(ctx);
    const ModelPtr intruder = require_model(ctx, ctx.config.intruder);
    const PPTMap ppts = require_ppts(ctx, world, ctx.layout.ppts());
    ScenarioInputs in;
    in.world = &world;
    in.ppts = &ppts;
    in.intruder = intruder.get();
    in.scenario = Scenario::ProtQueryProtDb;
    in.protected_fraction = 1.0;
    in.seed = ctx.config.eval_seed();
    const AttackSweepReport prot = attack_sweep(in, ctx.config.attacks);
    in.ppts = nullptr;
    in.scenario = Scenario::Baseline;
    in.protected_fraction = 0.0;
    const AttackSweepReport base = attack_sweep(in, ctx.config.attacks);

    double base_change = 0.0, max_change = 0.0;
    for (const auto& a : base.attacked)
        base_change = std::max(base_change, std::abs(a.report.mean_recall - base.unattacked.mean_recall));
    for (const auto& a : prot.attacked)
        max_change = std::max(max_change, std::abs(a.report.mean_recall - prot.unattacked.mean_recall));
    json doc;
    doc["intruder"] = intruder->id();
    doc["protected"] = prot.to_json();
    doc["baseline"] = base.to_json();
    doc["baseline_max_change"] = base_change;
    doc["protected_max_change"] = max_change;
    write_report_pair(ctx, "attack_eval", doc, "");
    io::write_text(ctx.layout.reports() / "attack_eval_protected.csv", prot.to_csv());
    io::write_text(ctx.layout.reports() / "attack_eval_baseline.csv", base.to_csv());

    std::vector<double> bars{prot.unattacked.mean_recall};
    json labels = json::array({"none"});
    for (const auto& a : prot.attacked) {
        bars.push_back(a.report.mean_recall);
        labels.push_back(a.spec.label());
    }
    fs::create_directories(ctx.layout.plots());
    const fs::path png = ctx.layout.plots() / "attack_eval.png";
    plot::write_bar_chart(png, bars);
    write_plot_sidecar(png, ctx.config.hash(), {{"labels", labels}, {"recall", bars}});
    logger(ctx) << "attack-eval: protected unattacked " << prot.unattacked.mean_recall << ", max change " << max_change
                << "; baseline max change " << base_change << "\n";
}

void cmd_ablate(const CommandContext& ctx) {
    const World world = require_world(ctx);
    const ModelPtr intruder = require_model(ctx, ctx.config.intruder);
    const PPTMap full = require_ppts(ctx, world, ctx.layout.ppts());
    const Ensemble ensemble = require_ensemble(ctx);
    PPTTrainSpec spec = ctx.config.ppt;
    spec.seed = ctx.config.ppt_seed();
    spec.use_logdet = false;
    PPTMap ablated;
    for (const auto& u : world.users) {
        PPTTrainingResult res = train_one(ctx, world, ensemble, u.user_id, spec);
        save_trained(ctx, ctx.layout.ablated_ppts(), u.user_id, res, "ablated_");
        ablated.emplace(u.user_id, std::move(res.ppt));
    }
    const std::uint64_t seed = ctx.config.eval_seed();
    const ScenarioReport base = run_scenario(world, {}, {}, *intruder, Scenario::Baseline, 0.0, seed);
    const ScenarioReport rf = run_scenario(world, {}, full, *intruder, Scenario::ProtQueryProtDb, 1.0, seed);
    const ScenarioReport ra = run_scenario(world, {}, ablated, *intruder, Scenario::ProtQueryProtDb, 1.0, seed);

    // Within-user geometry, averaged over users, plus the same over all users' features pooled.
    double cu = 0.0, cf = 0.0, ca = 0.0;
    std::vector<FeatureVector> pu, pf, pa;
    for (const auto& u : world.users) {
        const auto fu = user_features(*intruder, u, nullptr);
        const auto ff = user_features(*intruder, u, &full.at(u.user_id));
        const auto fa = user_features(*intruder, u, &ablated.at(u.user_id));
        cu += mean_pairwise_cosine(fu);
        cf += mean_pairwise_cosine(ff);
        ca += mean_pairwise_cosine(fa);
        pu.insert(pu.end(), fu.begin(), fu.end());
        pf.insert(pf.end(), ff.begin(), ff.end());
        pa.insert(pa.end(), fa.begin(), fa.end());
    }
    const double n = static_cast<double>(world.users.size());
    json doc;
    doc["intruder"] = intruder->id();
    doc["baseline"] = base.to_json();
    doc["full"] = rf.to_json();
    doc["ablated"] = ra.to_json();
    doc["pairwise_cosine"] = {{"unprotected", cu / n}, {"full", cf / n}, {"ablated", ca / n}};
    doc["pairwise_cosine_pooled"] = {{"unprotected", mean_pairwise_cosine(pu)},
                                     {"full", mean_pairwise_cosine(pf)},
                                     {"ablated", mean_pairwise_cosine(pa)}};
    const ScenarioReport both[] = {base, rf, ra};
    std::string csv = "variant,scenario,protected_fraction,model_id,user_id,recall\n";
    const char* names[] = {"baseline", "full", "ablated"};
    for (int k = 0; k < 3; ++k) {
        const std::string body = scenario_csv(std::span<const ScenarioReport>(&both[k], 1));
        std::size_t pos = body.find('\n') + 1;
        while (pos < body.size()) {
            const std::size_t end = body.find('\n', pos);
            csv += std::string(names[k]) + "," + body.substr(pos, end - pos + 1);
            pos = end + 1;
        }
    }
    write_report_pair(ctx, "ablation", doc, csv);
    fs::create_directories(ctx.layout.plots());
    const fs::path png = ctx.layout.plots() / "ablation.png";
    const std::vector<double> bars{base.mean_recall, rf.mean_recall, ra.mean_recall};
    plot::write_bar_chart(png, bars);
    write_plot_sidecar(png, ctx.config.hash(), {{"labels", {"baseline", "full", "ablated"}}, {"recall", bars}});
    logger(ctx) << "ablate: baseline " << base.mean_recall << " full " << rf.mean_recall << " ablated "
                << ra.mean_recall << "\n";
}

void cmd_leave_one_out(const CommandContext& ctx) {
    const World world = require_world(ctx);
    const Ensemble ensemble = require_ensemble(ctx);
    PPTTrainSpec spec = ctx.config.ppt;
    spec.seed = ctx.config.ppt_seed();
    const auto results = leave_one_out(world, {}, ensemble, spec, ctx.config.eval_seed());
    json doc;
    doc["results"] = json::array();
    std::string csv = "held_out_model,baseline_recall,protected_recall\n";
    char buf[256];
    for (const auto& r : results) {
        doc["results"].push_back(
            {{"held_out", r.held_out_id}, {"baseline_recall", r.baseline_recall}, {"protected_recall", r.protected_recall}});
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n", r.held_out_id.c_str(), r.baseline_recall, r.protected_recall);
        csv += buf;
        logger(ctx) << "leave-one-out: " << r.held_out_id << " baseline " << r.baseline_recall << " protected "
                    << r.protected_recall << "\n";
    }
    write_report_pair(ctx, "leave_one_out", doc, csv);
}

}  // namespace protego
