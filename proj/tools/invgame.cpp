// invgame <mode> --config <path> [--out <dir>] [--seed <u64>]

#include "cli/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

int main(int argc, char** argv) {
    namespace ic = invgame::cli;
    CLI::App app{"Inverse solver for linear-quadratic output-feedback games"};
    app.require_subcommand(1, 1);

    ic::RunOptions opt;
    std::string seed_text;
    for (const auto& mode : ic::modes()) {
        auto* sub = app.add_subcommand(mode);
        sub->add_option("--config", opt.config_path, "experiment config (YAML or JSON)")->required();
        sub->add_option("--out", opt.out_dir, "output directory (default: output.dir or .)");
        sub->add_option("--seed", seed_text, "RNG seed, overrides INVGAME_SEED and the config");
        sub->callback([&opt, mode] { opt.mode = mode; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : ic::kConfigInvalid;
    }

    if (!seed_text.empty()) {
        opt.seed = ic::parse_seed(seed_text);
        if (!opt.seed) {
            std::cerr << "config invalid: --seed must be an unsigned 64-bit integer\n";
            return ic::kConfigInvalid;
        }
    }
    if (const char* env = std::getenv("INVGAME_SEED"); env && *env) {
        opt.env_seed = ic::parse_seed(env);
        if (!opt.env_seed) {
            std::cerr << "config invalid: INVGAME_SEED must be an unsigned 64-bit integer\n";
            return ic::kConfigInvalid;
        }
    }
    return ic::run(opt, std::cerr);
}
