#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "peadapt/commands.hpp"

namespace {

int exit_code_for(const peadapt::Error& e) {
    const std::string kind = e.kind();
    if (kind == "configuration") return 2;
    if (kind == "io" || kind == "ingestion") return 3;
    if (kind == "input" || kind == "shape" || kind == "lookup") return 4;
    if (kind == "training") return 5;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter-efficient adapters and prompts for a frozen dual encoder"};
    app.require_subcommand(1);
    app.set_version_flag("--version", peadapt::kVersion);

    std::string config_file, preset, checkpoint, out_dir;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    app.add_option("--config", config_file, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "override one key (key=value), repeatable")->take_all();
    app.add_option("--checkpoint", checkpoint, "checkpoint to load (train: resume from it)");
    app.add_option("--out", out_dir, "output directory");
    auto* seed_opt = app.add_option("--seed", seed, "seed for training, adapters and augmentation");
    app.add_option("--preset", preset, "host preset")->check(CLI::IsMember({"toy", "full"}));

    const std::vector<std::pair<std::string, std::string>> commands{
        {"train", "train adapters and prompts on a dataset"},
        {"eval", "evaluate a checkpoint on a split"},
        {"audit", "count trainable and frozen parameters"},
        {"synth", "write a synthetic moving-blob dataset"},
        {"kfold", "k-fold cross-validation over the annotation folds"},
        {"export-attention", "gradient-weighted attention rollout heatmaps for one clip"},
        {"export-embeddings", "clip embeddings, raw or t-SNE projected"},
    };
    for (const auto& [name, help] : commands) {
        app.add_subcommand(name, help)->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        peadapt::ConfigSources src;
        src.preset = preset;
        src.file = config_file;
        src.overrides = overrides;
        if (*seed_opt) {
            const std::string s = std::to_string(seed);
            src.flags = {{"train.seed", s}, {"adapter.seed", s}, {"aug.seed", s}};
        }
        const auto cfg = peadapt::resolve_config(src);
        peadapt::CommandContext ctx;
        ctx.out_dir = out_dir;
        ctx.checkpoint = checkpoint;
        return peadapt::dispatch_command(app.get_subcommands().front()->get_name(), cfg, ctx);
    } catch (const peadapt::Error& e) {
        std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error [internal]: " << e.what() << "\n";
        return 1;
    }
}
