#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "protego/face_world.hpp"
#include "protego/fr_models.hpp"
#include "protego/ppt_engine.hpp"

namespace protego {

struct DBEntry {
    std::int64_t entry_id = 0;
    int identity_id = 0;  // evaluation only; search never reads it
    FeatureVector feature;
    std::string content_ref;
    bool is_protected = false;
};

struct Database {
    std::vector<DBEntry> entries;
    std::string model_id;

    std::size_t size() const { return entries.size(); }
    /// Number of entries carrying the given identity.
    std::size_t count_identity(int identity_id) const;
};

struct DBImage {
    Image image;
    int identity_id = 0;
    std::string content_ref;
    bool is_protected = false;
};

struct SearchHit {
    std::int64_t entry_id = 0;
    double similarity = 0.0;
    bool operator==(const SearchHit&) const = default;
};

Database build_db(std::span<const DBImage> images, const FRModel& model);

/// Exact top-K by cosine similarity, descending; ties by ascending entry_id.
std::vector<SearchHit> search(const Image& query, const FRModel& model, const Database& db, std::size_t k);
std::vector<SearchHit> search(const FeatureVector& query, const Database& db, std::size_t k);

/// Percentage of the top-K hits that carry `query_identity`, with K the
/// number of DB entries of that identity.
double recall(const Image& query, int query_identity, const FRModel& model, const Database& db);
double recall(const FeatureVector& query, int query_identity, const Database& db);

enum class Scenario { Baseline, UnprotQueryProtDb, ProtQueryUnprotDb, ProtQueryProtDb };

std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);
bool protects_queries(Scenario s);
bool protects_db(Scenario s);

struct ScenarioReport {
    Scenario scenario = Scenario::Baseline;
    std::map<int, double> per_user_recall;
    double mean_recall = 0.0;    // mean over users of per-user query means
    double pooled_recall = 0.0;  // mean over all queries
    double protected_fraction = 0.0;
    std::string model_id;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

using PPTMap = std::map<int, PPT>;
using ImageTransform = std::function<Image(const Image&)>;

/// Evaluation of one scenario. The DB holds the DB images of every user in
/// the world plus the noise identities; recall is measured for `user_ids`
/// (all users when empty). `attack`, when set, is applied to every query and
/// DB image before embedding.
ScenarioReport run_scenario(const World& world, const std::vector<int>& user_ids, const PPTMap& ppts,
                            const FRModel& intruder, Scenario scenario, double protected_fraction,
                            std::uint64_t seed, const ImageTransform& attack = {});

/// CSV with one row per user of every report:
/// scenario,protected_fraction,model_id,user_id,recall
std::string scenario_csv(std::span<const ScenarioReport> reports);

/// Trains one PPT per user against the ensemble; the per-user seed is derived
/// from spec.seed and the user id.
PPTMap train_user_ppts(const World& world, const std::vector<int>& user_ids, const Ensemble& ensemble,
                       const PPTTrainSpec& spec);

struct LeaveOneOutResult {
    std::string held_out_id;
    double baseline_recall = 0.0;
    double protected_recall = 0.0;
};

std::vector<LeaveOneOutResult> leave_one_out(const World& world, const std::vector<int>& user_ids,
                                             const Ensemble& ensemble, const PPTTrainSpec& spec,
                                             std::uint64_t seed);

struct TeamResult {
    std::vector<std::string> member_ids;
    std::map<std::string, double> holdout_recall;
    double mean_recall = 0.0;
};

/// Exhaustive team enumeration; teams sorted by mean hard-scenario holdout
/// recall ascending (ties keep enumeration order).
std::vector<TeamResult> subset_transfer(const World& world, const std::vector<int>& user_ids, const Ensemble& pool,
                                        int team_size, const Ensemble& holdouts, const PPTTrainSpec& spec,
                                        std::uint64_t seed);

inline constexpr std::size_t kSubsetPoolBudget = 6;

// <stem>.bin feature matrix + <stem>.json manifest.
void save_database(const Database& db, const std::filesystem::path& stem);
Database load_database(const std::filesystem::path& stem);

}  // namespace protego
