#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mbn/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"batch-normalization family training stack (bn / mbn / brn / movnorm)"};
    app.require_subcommand(1);

    mbn::cli::TrainCliOptions topt;
    std::string seeds_spec;
    auto* train = app.add_subcommand("train", "run a training experiment from a config file");
    train->add_option("--config", topt.config_path, "flat key = value config file")->required();
    train->add_option("--set", topt.overrides, "override, e.g. --set norm.mode=bn (repeatable)");
    train->add_option("--out", topt.out_dir, "output directory (metrics.csv, config.resolved)");
    train->add_option("--seeds", seeds_spec, "seed sweep, e.g. 1..5 or 1,3,9");

    mbn::cli::GradcheckOptions gopt;
    auto* gc = app.add_subcommand("gradcheck", "verify backward passes against finite differences");
    gc->add_option("mode", gopt.mode, "bn|mbn|brn|movnorm|mlp|all (default all)");
    gc->add_option("--batch", gopt.batch, "max batch size per instance");
    gc->add_option("--features", gopt.features, "max feature count per instance");
    gc->add_option("--memory", gopt.memory, "max stored batches per instance");
    gc->add_option("--instances", gopt.instances, "random instances per mode");
    gc->add_option("--seed", gopt.seed, "rng seed");
    gc->add_option("--lambda", gopt.lambda, "memory decay lambda (0 also asserts bn equivalence)");
    gc->add_option("--eta", gopt.eta, "memory decay eta");
    gc->add_option("--rel-tol", gopt.rel_tol, "layer-level relative tolerance");
    gc->add_option("--mlp-tol", gopt.mlp_rel_tol, "whole-network relative tolerance");

    mbn::cli::StatsbenchCliOptions sopt;
    auto* sb = app.add_subcommand("statsbench",
                                  "score statistics estimators against a drifting stream");
    sb->add_option("--config", sopt.config_path, "optional config file (bench.* keys)");
    sb->add_option("--set", sopt.overrides, "override, e.g. --set bench.drift=0.1 (repeatable)");
    sb->add_option("--out", sopt.out_dir, "output directory (statsbench.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? mbn::cli::kExitOk : mbn::cli::kExitBadConfig;
    }

    if (train->parsed()) {
        if (!seeds_spec.empty()) topt.overrides.push_back("seeds=" + seeds_spec);
        return mbn::cli::run_train(topt, std::cout, std::cerr);
    }
    if (gc->parsed()) return mbn::cli::run_gradcheck(gopt, std::cout, std::cerr);
    if (sb->parsed()) return mbn::cli::run_statsbench(sopt, std::cout, std::cerr);
    return mbn::cli::kExitOk;
}
