#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "protego/experiment.hpp"
#include "protego/io.hpp"

using namespace protego;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string workdir;
    bool overwrite = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
    auto* opt = cmd->add_option("--config", c.config, "Experiment config (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--seed", c.seed, "Master seed (overrides the config)");
    cmd->add_option("--workdir", c.workdir, "Experiment directory (overrides output_dir)");
    cmd->add_flag("--overwrite", c.overwrite, "Replace existing output");
    cmd->add_flag("-q,--quiet", c.quiet, "Suppress progress output");
}

CommandContext context(const Common& c) {
    ExperimentConfig cfg = ExperimentConfig::load(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.workdir.empty()) cfg.output_dir = c.workdir;
    return make_context(std::move(cfg), c.overwrite, c.quiet ? nullptr : &std::cerr);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Privacy protection textures for face images: training, protection and retrieval evaluation"};
    app.require_subcommand(1);

    Common common;

    auto* init = app.add_subcommand("init-config", "Write the default experiment config");
    std::string init_out = "config.json";
    init->add_option("path", init_out, "Output file");

    auto* gen = app.add_subcommand("gen-world", "Render the synthetic face dataset");
    add_common(gen, common);

    auto* train_fr = app.add_subcommand("train-fr", "Train the face-recognition roster");
    add_common(train_fr, common);

    auto* train_ppt = app.add_subcommand("train-ppt", "Train privacy protection textures");
    add_common(train_ppt, common);
    std::optional<int> user;
    train_ppt->add_option("--user", user, "User id (all users when omitted)");

    auto* protect = app.add_subcommand("protect", "Apply a PPT to an image or a directory of frames");
    add_common(protect, common, false);
    std::string in, ppt, out, uv;
    protect->add_option("--in", in, "Input PNG or directory of PNG frames")->required();
    protect->add_option("--ppt", ppt, "PPT path (stem, .bin or .json)")->required();
    protect->add_option("--out", out, "Output PNG or directory")->required();
    protect->add_option("--uv", uv, "16-bit UV map PNG (or directory of them)");

    auto* evaluate = app.add_subcommand("evaluate", "Retrieval recall per scenario and protected fraction");
    add_common(evaluate, common);
    std::string scenario;
    std::optional<double> fraction;
    evaluate->add_option("--scenario", scenario,
                         "baseline | unprot_query/prot_db | prot_query/unprot_db | prot_query/prot_db");
    evaluate->add_option("--fraction", fraction, "Protected fraction of DB entries")->check(CLI::Range(0.0, 1.0));

    auto* attack = app.add_subcommand("attack-eval", "Recall under filtering, compression and resizing");
    add_common(attack, common);

    auto* ablate = app.add_subcommand("ablate", "Full loss against the loss without the log-det term");
    add_common(ablate, common);

    auto* loo = app.add_subcommand("leave-one-out", "Hold out each ensemble member as the intruder");
    add_common(loo, common);

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed()) {
            io::write_json(init_out, ExperimentConfig::defaults().to_json());
            return 0;
        }
        if (protect->parsed()) {
            std::optional<CommandContext> ctx;
            if (!common.config.empty()) ctx = context(common);
            cmd_protect(ctx ? &*ctx : nullptr, in, ppt, out,
                        uv.empty() ? std::nullopt : std::optional<std::filesystem::path>(uv), std::cerr);
            return 0;
        }
        const CommandContext ctx = context(common);
        if (gen->parsed()) cmd_gen_world(ctx);
        else if (train_fr->parsed()) cmd_train_fr(ctx);
        else if (train_ppt->parsed()) cmd_train_ppt(ctx, user);
        else if (evaluate->parsed())
            cmd_evaluate(ctx, scenario.empty() ? std::nullopt : std::optional<Scenario>(parse_scenario(scenario)),
                         fraction);
        else if (attack->parsed()) cmd_attack_eval(ctx);
        else if (ablate->parsed()) cmd_ablate(ctx);
        else if (loo->parsed()) cmd_leave_one_out(ctx);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
