// leaklab command line: drives the password-leak study pipeline end to end or
// stage by stage. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
// error, 5 format error.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "leaklab/pipeline.hpp"
#include "leaklab/schema.hpp"

namespace {

struct GlobalArgs {
    std::string config_path;
    std::string out;
    std::vector<std::string> sets;
    uint64_t seed = 0;
    bool seed_given = false;
    bool verbose = false;
};

leaklab::PipelineConfig resolve_config(const GlobalArgs& g) {
    nlohmann::json j = leaklab::config_to_json(leaklab::PipelineConfig{});
    if (!g.config_path.empty()) {
        try {
            j.merge_patch(leaklab::load_json_file(g.config_path));
        } catch (const leaklab::Error& e) {
            throw leaklab::ConfigError(e.what());
        }
    }
    for (const std::string& s : g.sets) leaklab::apply_override(j, s);
    leaklab::PipelineConfig cfg = leaklab::config_from_json(j);
    if (g.seed_given) cfg.seed = g.seed;
    if (!g.out.empty()) cfg.out = g.out;
    return cfg;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const leaklab::ConfigError*>(&e)) return 2;
    if (dynamic_cast<const leaklab::FormatError*>(&e)) return 5;
    if (dynamic_cast<const leaklab::NumericError*>(&e)) return 4;
    if (dynamic_cast<const leaklab::ShapeError*>(&e)) return 4;
    if (dynamic_cast<const leaklab::Error*>(&e)) return 3;
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale password memorization, tracing, and editing lab"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may follow the subcommand

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON config file");
    app.add_option("--out", g.out, "run directory (overrides config)");
    auto* seed_opt = app.add_option("--seed", g.seed, "seed (overrides config)");
    app.add_option("--set", g.sets, "override a config key, e.g. --set train.epochs=50")
        ->allow_extra_args(false);
    app.add_flag("-v,--verbose", g.verbose, "log stage progress");

    std::string stage_for_sub;
    std::string mine_which = "pre";
    auto add_stage = [&](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->callback([&, name] { stage_for_sub = name; });
        return sub;
    };

    add_stage("build-data", "assemble the password-laced dataset and eval splits");
    add_stage("pretrain", "full-weight pretraining of the base on general text");
    add_stage("train", "LoRA fine-tune on the dataset");
    CLI::App* mine_sub = app.add_subcommand("mine", "prompt the model for injected passwords");
    mine_sub->add_option("--which", mine_which, "pre (finetuned) or post (edited)")
        ->check(CLI::IsMember({"pre", "post"}));
    mine_sub->callback([&] { stage_for_sub = "mine"; });
    add_stage("trace", "causal tracing attribution over credential prompts");
    add_stage("edit", "aggregate key/value and apply the rank-one update");
    add_stage("eval", "benchmark pre/post-edit token accuracy");
    add_stage("sweep", "re-apply the edit across scales and tabulate trade-offs");
    add_stage("run", "run the full pipeline");
    add_stage("report", "emit derived CSV/JSON reports and validate schemas");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) ? 2 : 0;
    }
    g.seed_given = seed_opt->count() > 0;

    try {
        leaklab::PipelineConfig cfg = resolve_config(g);
        leaklab::Pipeline pipe(cfg);
        if (stage_for_sub == "run") {
            pipe.run_all(g.verbose);
            std::cout << "run complete: " << cfg.out << "\n";
        } else if (stage_for_sub == "mine") {
            pipe.run_stage(mine_which == "pre" ? "mine-pre" : "mine-post");
        } else if (stage_for_sub == "train") {
            pipe.run_stage("train");
        } else if (stage_for_sub == "build-data") {
            pipe.run_stage("build-data");
        } else if (stage_for_sub == "pretrain") {
            pipe.run_stage("pretrain");
        } else if (stage_for_sub == "trace") {
            pipe.run_stage("trace");
        } else if (stage_for_sub == "edit") {
            pipe.run_stage("edit");
        } else if (stage_for_sub == "eval") {
            pipe.run_stage("eval");
        } else if (stage_for_sub == "sweep") {
            pipe.run_stage("sweep");
        } else if (stage_for_sub == "report") {
            pipe.run_stage("report");
        } else {
            std::cerr << "no subcommand\n";
            return 2;
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
