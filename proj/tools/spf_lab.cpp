#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "spf/cli_runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"spf-lab: spectral predictive features toolkit"};
    app.require_subcommand(1);
    spf::cli::CommandOptions opt;
    std::uint64_t seed = 0;
    std::uint64_t until = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "TOML configuration file")->required();
        sub->add_option("--seed", seed, "override the configured seed");
        sub->add_option("--out", opt.out_dir, "output directory")->capture_default_str();
    };
    for (const char* name : {"analyze-mdp", "solve-dtft", "verify-bounds"}) {
        auto* sub = app.add_subcommand(name);
        add_common(sub);
    }
    auto* train = app.add_subcommand("train", "train the agent with the auxiliary frequency loss");
    add_common(train);
    train->add_option("--profile", opt.profile, "desk or paper (default: train.profile)");
    train->add_option("--resume", opt.resume, "checkpoint base path to resume from");
    train->add_option("--until", until, "stop after this many environment steps");
    auto* recover = app.add_subcommand("recover", "recover future states from a DTFT field");
    add_common(recover);
    recover->add_option("--profile", opt.profile, "desk or paper (default: train.profile)");
    recover->add_option("--checkpoint", opt.checkpoint, "learned checkpoint base path (default: exact field)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : spf::cli::kExitConfig;
    }
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed") > 0) opt.seed = seed;
    if (sub->get_option_no_throw("--until") != nullptr && sub->count("--until") > 0) opt.until = until;
    return spf::cli::run_command(sub->get_name(), opt);
}
