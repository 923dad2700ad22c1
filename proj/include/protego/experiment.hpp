#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protego/face_world.hpp"
#include "protego/fr_models.hpp"
#include "protego/ppt_engine.hpp"
#include "protego/retrieval.hpp"
#include "protego/robustness.hpp"

namespace protego {

struct RosterEntry {
    std::string name;
    Architecture architecture = Architecture::Conv3;
    LossKind loss = LossKind::Softmax;
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    static constexpr int kFormatVersion = 1;

    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "experiment";

    WorldConfig world;

    // Face-recognition training: an identity pool disjoint from the users.
    int pool_identities = 100;
    int pool_per_identity = 16;
    FRTrainSpec fr;  // shared hyper-parameters; architecture/loss/seed come from the roster
    std::vector<RosterEntry> roster;
    std::vector<std::string> ensemble;
    std::string intruder;

    PPTTrainSpec ppt;

    std::vector<Scenario> scenarios;
    std::vector<double> fractions;
    std::vector<AttackSpec> attacks;

    static ExperimentConfig defaults();
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);
    nlohmann::json to_json() const;

    /// Throws ConfigError when a field is out of range or an id does not resolve.
    void validate() const;
    /// Hash of everything that determines results (output_dir excluded).
    std::string hash() const;

    std::uint64_t world_seed() const { return derive_seed(seed, 1); }
    std::uint64_t pool_seed() const { return derive_seed(seed, 2); }
    std::uint64_t ppt_seed() const { return derive_seed(seed, 3); }
    std::uint64_t eval_seed() const { return derive_seed(seed, 4); }
    std::uint64_t model_seed(const RosterEntry& e) const { return derive_seed(seed, 1000 + e.seed); }
    const RosterEntry& roster_entry(const std::string& name) const;
};

// Dataset persistence: <dir>/manifest.json, images/*.png, uv/*.png.
void save_world(const World& world, const std::filesystem::path& dir, const std::string& config_hash);
World load_world(const std::filesystem::path& dir, const WorldConfig& config, const std::string& config_hash);

/// Paths inside one experiment directory.
struct Layout {
    std::filesystem::path root;
    std::filesystem::path world() const { return root / "world"; }
    std::filesystem::path models() const { return root / "models"; }
    std::filesystem::path ppts() const { return root / "ppts"; }
    std::filesystem::path ablated_ppts() const { return root / "ppts_ablated"; }
    std::filesystem::path reports() const { return root / "reports"; }
    std::filesystem::path plots() const { return root / "plots"; }
};

struct CommandContext {
    ExperimentConfig config;
    Layout layout;
    bool overwrite = false;
    std::ostream* log = nullptr;
};

CommandContext make_context(ExperimentConfig config, bool overwrite, std::ostream* log);

void cmd_gen_world(const CommandContext& ctx);
void cmd_train_fr(const CommandContext& ctx);
/// Trains the given user (every user when empty).
void cmd_train_ppt(const CommandContext& ctx, std::optional<int> user);
/// Protects one PNG or every PNG in a directory. UV maps come from `uv_path`
/// (a 16-bit UV PNG, or a directory of them with matching names) or, when
/// absent, from the experiment's rendered world.
void cmd_protect(const CommandContext* ctx, const std::filesystem::path& in, const std::filesystem::path& ppt_stem,
                 const std::filesystem::path& out, const std::optional<std::filesystem::path>& uv_path,
                 std::ostream& log);
/// Runs the given scenario/fraction, or the configured grid when absent.
void cmd_evaluate(const CommandContext& ctx, std::optional<Scenario> scenario, std::optional<double> fraction);
void cmd_attack_eval(const CommandContext& ctx);
void cmd_ablate(const CommandContext& ctx);
void cmd_leave_one_out(const CommandContext& ctx);

/// Mean pairwise cosine over a feature set.
double mean_pairwise_cosine(const std::vector<FeatureVector>& features);

}  // namespace protego
