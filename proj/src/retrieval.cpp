#include "protego/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "protego/io.hpp"

namespace protego {
namespace {

constexpr char kDbMagic[9] = "PRTGDB01";
constexpr std::uint32_t kDbVersion = 1;

bool ranks_before(const SearchHit& a, const SearchHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.entry_id < b.entry_id;
}

struct EvalImage {
    const RenderedFace* face;
    int identity_id;
    std::string ref;
    bool is_protected;
};

Image prepare(const EvalImage& e, const PPTMap& ppts, const ImageTransform& attack) {
    Image img = e.face->image;
    if (e.is_protected) {
        const auto it = ppts.find(e.identity_id);
        img = apply_texture(img, it->second.texture, e.face->uv);
    }
    if (attack) img = attack(img);
    return img;
}

const PPT& require_ppt(const PPTMap& ppts, int user_id) {
    const auto it = ppts.find(user_id);
    if (it == ppts.end()) throw ConfigError("no PPT for user " + std::to_string(user_id));
    return it->second;
}

std::vector<int> resolve_users(const World& world, const std::vector<int>& user_ids) {
    std::vector<int> ids = user_ids;
    if (ids.empty())
        for (const auto& u : world.users) ids.push_back(u.user_id);
    for (int id : ids) {
        const bool found = std::any_of(world.users.begin(), world.users.end(),
                                       [id](const UserSplit& u) { return u.user_id == id; });
        if (!found) throw ConfigError("unknown user id " + std::to_string(id));
    }
    return ids;
}

}  // namespace

std::size_t Database::count_identity(int identity_id) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [&](const DBEntry& e) { return e.identity_id == identity_id; }));
}

Database build_db(std::span<const DBImage> images, const FRModel& model) {
    if (images.empty()) throw ConfigError("build_db: empty image list");
    Database db;
    db.model_id = model.id();
    db.entries.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        DBEntry e;
        e.entry_id = static_cast<std::int64_t>(i);
        e.identity_id = images[i].identity_id;
        e.content_ref = images[i].content_ref;
        e.is_protected = images[i].is_protected;
        try {
            e.feature = model.embed(images[i].image);
        } catch (const Error& err) {
            throw ShapeError("build_db: image " + std::to_string(i) + ": " + err.what());
        }
        db.entries.push_back(std::move(e));
    }
    return db;
}

std::vector<SearchHit> search(const FeatureVector& query, const Database& db, std::size_t k) {
    if (k < 1) throw BoundsError("search: K must be >= 1");
    if (k > db.size())
        throw BoundsError("search: K=" + std::to_string(k) + " exceeds database size " + std::to_string(db.size()));
    std::vector<SearchHit> hits;
    hits.reserve(db.size());
    for (const auto& e : db.entries) hits.push_back({e.entry_id, cosine_sim(query, e.feature)});
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), ranks_before);
    hits.resize(k);
    return hits;
}

std::vector<SearchHit> search(const Image& query, const FRModel& model, const Database& db, std::size_t k) {
    if (model.id() != db.model_id)
        throw ConsistencyError("search: model '" + model.id() + "' does not match database model '" +
                               db.model_id + "'");
    return search(model.embed(query), db, k);
}

double recall(const FeatureVector& query, int query_identity, const Database& db) {
    const std::size_t k = db.count_identity(query_identity);
    if (k == 0) throw UndefinedMetricError("recall: no DB entries for identity " + std::to_string(query_identity));
    const auto hits = search(query, db, k);
    std::size_t relevant = 0;
    for (const auto& h : hits) {
        const auto pos = static_cast<std::size_t>(h.entry_id);
        const DBEntry* e = pos < db.size() && db.entries[pos].entry_id == h.entry_id ? &db.entries[pos] : nullptr;
        if (!e)
            e = &*std::find_if(db.entries.begin(), db.entries.end(),
                               [&](const DBEntry& x) { return x.entry_id == h.entry_id; });
        if (e->identity_id == query_identity) ++relevant;
    }
    return 100.0 * static_cast<double>(relevant) / static_cast<double>(k);
}

double recall(const Image& query, int query_identity, const FRModel& model, const Database& db) {
    if (model.id() != db.model_id)
        throw ConsistencyError("recall: model '" + model.id() + "' does not match database model '" +
                               db.model_id + "'");
    return recall(model.embed(query), query_identity, db);
}

std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::Baseline: return "baseline";
        case Scenario::UnprotQueryProtDb: return "unprot_query/prot_db";
        case Scenario::ProtQueryUnprotDb: return "prot_query/unprot_db";
        case Scenario::ProtQueryProtDb: return "prot_query/prot_db";
    }
    return "baseline";
}

Scenario parse_scenario(const std::string& s) {
    for (Scenario v : {Scenario::Baseline, Scenario::UnprotQueryProtDb, Scenario::ProtQueryUnprotDb,
                       Scenario::ProtQueryProtDb})
        if (s == to_string(v)) return v;
    if (s == "easy-db") return Scenario::UnprotQueryProtDb;
    if (s == "easy-query") return Scenario::ProtQueryUnprotDb;
    if (s == "hard") return Scenario::ProtQueryProtDb;
    throw ConfigError("unknown scenario '" + s + "'");
}

bool protects_queries(Scenario s) { return s == Scenario::ProtQueryUnprotDb || s == Scenario::ProtQueryProtDb; }
bool protects_db(Scenario s) { return s == Scenario::UnprotQueryProtDb || s == Scenario::ProtQueryProtDb; }

nlohmann::json ScenarioReport::to_json() const {
    nlohmann::json j;
    j["scenario"] = to_string(scenario);
    j["model_id"] = model_id;
    j["protected_fraction"] = protected_fraction;
    j["seed"] = seed;
    j["mean_recall"] = mean_recall;
    j["pooled_recall"] = pooled_recall;
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [u, r] : per_user_recall) per[std::to_string(u)] = r;
    j["per_user_recall"] = per;
    return j;
}

ScenarioReport run_scenario(const World& world, const std::vector<int>& user_ids, const PPTMap& ppts,
                            const FRModel& intruder, Scenario scenario, double protected_fraction,
                            std::uint64_t seed, const ImageTransform& attack) {
    if (!(protected_fraction >= 0.0 && protected_fraction <= 1.0))
        throw ConfigError("protected_fraction must lie in [0,1]");
    const std::vector<int> evaluated = resolve_users(world, user_ids);
    const bool prot_q = protects_queries(scenario);
    const bool prot_db = protects_db(scenario);
    for (int id : evaluated) {
        if (!prot_q && !prot_db) break;
        const PPT& ppt = require_ppt(ppts, id);
        const auto& ids = ppt.meta.ensemble_ids;
        if (std::find(ids.begin(), ids.end(), intruder.id()) != ids.end())
            throw ConfigError("intruder model '" + intruder.id() + "' was used to train the PPT of user " +
                              std::to_string(id));
    }
    auto is_evaluated = [&](int id) { return std::find(evaluated.begin(), evaluated.end(), id) != evaluated.end(); };

    std::vector<EvalImage> db_images;
    for (const auto& user : world.users) {
        std::vector<const RenderedFace*> faces;
        for (const auto& f : user.train_db_images) faces.push_back(&f);
        for (const auto& f : user.unseen_db_images) faces.push_back(&f);
        std::vector<bool> chosen(faces.size(), false);
        if (prot_db && is_evaluated(user.user_id)) {
            const auto n = static_cast<std::size_t>(std::llround(protected_fraction * static_cast<double>(faces.size())));
            std::vector<std::size_t> order(faces.size());
            std::iota(order.begin(), order.end(), 0);
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(user.user_id)));
            rng.shuffle(order);
            for (std::size_t i = 0; i < n; ++i) chosen[order[i]] = true;
        }
        for (std::size_t i = 0; i < faces.size(); ++i)
            db_images.push_back({faces[i], user.user_id,
                                 "user" + std::to_string(user.user_id) + "/db" + std::to_string(i), chosen[i]});
    }
    for (std::size_t i = 0; i < world.noise_db_images.size(); ++i) {
        const auto& f = world.noise_db_images[i];
        db_images.push_back({&f, f.identity_id, "noise/" + std::to_string(i), false});
    }

    std::vector<DBImage> prepared;
    prepared.reserve(db_images.size());
    for (const auto& e : db_images)
        prepared.push_back({prepare(e, ppts, attack), e.identity_id, e.ref, e.is_protected});
    const Database db = build_db(prepared, intruder);

    ScenarioReport report;
    report.scenario = scenario;
    report.protected_fraction = protected_fraction;
    report.model_id = intruder.id();
    report.seed = seed;
    double pooled = 0.0;
    std::size_t n_queries = 0;
    for (int id : evaluated) {
        const auto& user = *std::find_if(world.users.begin(), world.users.end(),
                                         [id](const UserSplit& u) { return u.user_id == id; });
        if (user.query_images.empty()) throw ConfigError("user " + std::to_string(id) + " has no queries");
        double sum = 0.0;
        for (const auto& q : user.query_images) {
            const Image img = prepare({&q, id, {}, prot_q}, ppts, attack);
            const double r = recall(intruder.embed(img), id, db);
            sum += r;
            pooled += r;
            ++n_queries;
        }
        report.per_user_recall[id] = sum / static_cast<double>(user.query_images.size());
    }
    double mean = 0.0;
    for (const auto& [u, r] : report.per_user_recall) mean += r;
    report.mean_recall = mean / static_cast<double>(report.per_user_recall.size());
    report.pooled_recall = pooled / static_cast<double>(n_queries);
    return report;
}

std::string scenario_csv(std::span<const ScenarioReport> reports) {
    std::string out = "scenario,protected_fraction,model_id,user_id,recall\n";
    char buf[256];
    for (const auto& r : reports) {
        for (const auto& [u, v] : r.per_user_recall) {
            std::snprintf(buf, sizeof buf, "%s,%.17g,%s,%d,%.17g\n", to_string(r.scenario).c_str(),
                          r.protected_fraction, r.model_id.c_str(), u, v);
            out += buf;
        }
    }
    return out;
}

PPTMap train_user_ppts(const World& world, const std::vector<int>& user_ids, const Ensemble& ensemble,
                       const PPTTrainSpec& spec) {
    PPTMap out;
    for (int id : resolve_users(world, user_ids)) {
        const auto& user = *std::find_if(world.users.begin(), world.users.end(),
                                         [id](const UserSplit& u) { return u.user_id == id; });
        PPTTrainSpec s = spec;
        s.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(id));
        PPTTrainingResult res = train_ppt(to_samples(user.train_db_images), id, ensemble, s,
                                          world.config.texture_size, world.config.texture_size);
        out.emplace(id, std::move(res.ppt));
    }
    return out;
}

std::vector<LeaveOneOutResult> leave_one_out(const World& world, const std::vector<int>& user_ids,
                                             const Ensemble& ensemble, const PPTTrainSpec& spec,
                                             std::uint64_t seed) {
    if (ensemble.size() < 2) throw ConfigError("leave_one_out: ensemble needs at least 2 members");
    std::vector<LeaveOneOutResult> out;
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        const FRModel& held = *ensemble.members[i];
        PPTMap ppts;
        try {
            ppts = train_user_ppts(world, user_ids, ensemble.without(i), spec);
        } catch (const Error& e) {
            throw Error("leave_one_out: held-out model '" + held.id() + "': " + e.what());
        }
        LeaveOneOutResult r;
        r.held_out_id = held.id();
        r.baseline_recall = run_scenario(world, user_ids, {}, held, Scenario::Baseline, 0.0, seed).mean_recall;
        r.protected_recall =
            run_scenario(world, user_ids, ppts, held, Scenario::ProtQueryProtDb, 1.0, seed).mean_recall;
        out.push_back(r);
    }
    return out;
}

std::vector<TeamResult> subset_transfer(const World& world, const std::vector<int>& user_ids, const Ensemble& pool,
                                        int team_size, const Ensemble& holdouts, const PPTTrainSpec& spec,
                                        std::uint64_t seed) {
    if (holdouts.size() == 0) throw ConfigError("subset_transfer: holdout set is empty");
    if (pool.size() > kSubsetPoolBudget)
        throw ConfigError("subset_transfer: pool of " + std::to_string(pool.size()) + " exceeds the budget of " +
                          std::to_string(kSubsetPoolBudget));
    if (team_size < 1 || static_cast<std::size_t>(team_size) > pool.size())
        throw ConfigError("subset_transfer: team_size must lie in [1, |pool|]");
    const std::size_t n = pool.size();
    std::vector<TeamResult> out;
    // Lexicographic k-combinations of member indices.
    std::vector<bool> pick(n, false);
    std::fill(pick.begin(), pick.begin() + team_size, true);
    do {
        Ensemble team;
        for (std::size_t i = 0; i < n; ++i)
            if (pick[i]) team.members.push_back(pool.members[i]);
        const PPTMap ppts = train_user_ppts(world, user_ids, team, spec);
        TeamResult r;
        r.member_ids = team.ids();
        for (const auto& h : holdouts.members) {
            const double v = run_scenario(world, user_ids, ppts, *h, Scenario::ProtQueryProtDb, 1.0, seed).mean_recall;
            r.holdout_recall[h->id()] = v;
            r.mean_recall += v / static_cast<double>(holdouts.size());
        }
        out.push_back(std::move(r));
    } while (std::prev_permutation(pick.begin(), pick.end()));
    std::stable_sort(out.begin(), out.end(),
                     [](const TeamResult& a, const TeamResult& b) { return a.mean_recall < b.mean_recall; });
    return out;
}

void save_database(const Database& db, const std::filesystem::path& stem) {
    const std::size_t d = db.entries.empty() ? 0 : db.entries.front().feature.dim();
    std::vector<double> mat;
    mat.reserve(db.size() * d);
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : db.entries) {
        if (e.feature.dim() != d) throw ShapeError("save_database: features differ in dimension");
        mat.insert(mat.end(), e.feature.values.begin(), e.feature.values.end());
        entries.push_back({{"entry_id", e.entry_id},
                           {"identity_id", e.identity_id},
                           {"content_ref", e.content_ref},
                           {"protected", e.is_protected}});
    }
    io::write_blob(stem.string() + ".bin", kDbMagic, kDbVersion, {db.size(), d}, mat);
    nlohmann::json manifest;
    manifest["format"] = "protego-db";
    manifest["format_version"] = kDbVersion;
    manifest["model_id"] = db.model_id;
    manifest["entries"] = entries;
    io::write_json(stem.string() + ".json", manifest);
}

Database load_database(const std::filesystem::path& stem) {
    const auto manifest = io::read_json(stem.string() + ".json");
    if (manifest.value("format", "") != "protego-db" || manifest.value("format_version", 0u) != kDbVersion)
        throw FormatError(stem.string() + ".json: unsupported database format or version");
    const io::Blob blob = io::read_blob(stem.string() + ".bin", kDbMagic);
    const auto& entries = manifest.at("entries");
    if (blob.dims.size() != 2 || blob.dims[0] != entries.size())
        throw FormatError(stem.string() + ".bin: feature matrix does not match manifest");
    const std::size_t d = blob.dims[1];
    Database db;
    db.model_id = manifest.at("model_id");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        DBEntry e;
        e.entry_id = entries[i].at("entry_id");
        e.identity_id = entries[i].at("identity_id");
        e.content_ref = entries[i].at("content_ref");
        e.is_protected = entries[i].at("protected");
        e.feature.values.assign(blob.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                blob.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        db.entries.push_back(std::move(e));
    }
    return db;
}

}  // namespace protego
