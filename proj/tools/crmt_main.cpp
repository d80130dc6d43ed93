#include "crmt/errors.hpp"
#include "crmt/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

namespace {

struct CliOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> jobs;
    std::string strategy = "crmt";
    crmt::CommandOverrides overrides;
    std::string checkpoint, dataset;
    std::optional<std::size_t> oracle_samples;
    std::optional<double> oracle_tol, tau_scale;
};

crmt::ExperimentConfig resolve_config(const CliOptions& opt) {
    crmt::ExperimentConfig cfg = opt.config_path.empty()
                                     ? crmt::ExperimentConfig::defaults()
                                     : crmt::load_config(opt.config_path);
    if (opt.seed) {
        nlohmann::ordered_json j = cfg.to_json();
        j["seed"] = *opt.seed;
        j["data"]["seed"] = *opt.seed;
        cfg = crmt::ExperimentConfig::from_json(j);
    }
    if (opt.out) cfg.out = *opt.out;
    if (opt.jobs) cfg.jobs = *opt.jobs;
    cfg.validate();
    return cfg;
}

crmt::CommandOverrides resolve_overrides(const CliOptions& opt) {
    crmt::CommandOverrides ov;
    if (!opt.checkpoint.empty()) ov.checkpoint = opt.checkpoint;
    if (!opt.dataset.empty()) ov.dataset = opt.dataset;
    ov.oracle_samples = opt.oracle_samples;
    ov.oracle_tol = opt.oracle_tol;
    ov.tau_scale = opt.tau_scale;
    return ov;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Certified-robustness laboratory for multi-modal classifiers"};
    app.require_subcommand(1);

    CliOptions opt;
    app.add_option("--config", opt.config_path, "Experiment config (JSON)");
    std::uint64_t seed_val = 0;
    auto* seed_flag = app.add_option("--seed", seed_val, "Override the global seed");
    std::string out_val;
    auto* out_flag = app.add_option("--out", out_val, "Override the output directory");
    int jobs_val = 0;
    auto* jobs_flag = app.add_option("--jobs", jobs_val, "Worker threads for sweeps (0 = auto)");

    auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset files");
    auto* train = app.add_subcommand("train", "Train a model with the chosen strategy");
    train->add_option("--strategy", opt.strategy, "jt | ojt | crmt | crmt-at")->required();
    auto* certify = app.add_subcommand("certify", "Emit per-sample certified radii");
    auto* attack = app.add_subcommand("attack", "Run the attack sweep grid");
    auto* oracle = app.add_subcommand("oracle", "Validate certificates against the search oracle");
    auto* report = app.add_subcommand("report", "Consolidate run outputs into plot-ready files");

    for (auto* sub : {certify, attack, oracle}) {
        sub->add_option("--strategy", opt.strategy, "Strategy whose checkpoint to use");
        sub->add_option("--checkpoint", opt.checkpoint, "Explicit checkpoint path");
        sub->add_option("--dataset", opt.dataset, "Explicit dataset path");
    }
    std::size_t samples_val = 0;
    auto* samples_flag = oracle->add_option("--samples", samples_val, "Sample budget");
    double tol_val = 0.0;
    auto* tol_flag = oracle->add_option("--tol", tol_val, "Bisection width");
    double tau_scale_val = 0.0;
    auto* tau_flag = oracle->add_option(
        "--tau-scale", tau_scale_val,
        "Scale the Lipschitz estimates (values < 1 are an unsound negative control)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) ? 1 : 0;
    }

    if (*seed_flag) opt.seed = seed_val;
    if (*out_flag) opt.out = out_val;
    if (*jobs_flag) opt.jobs = jobs_val;
    if (*samples_flag) opt.oracle_samples = samples_val;
    if (*tol_flag) opt.oracle_tol = tol_val;
    if (*tau_flag) opt.tau_scale = tau_scale_val;

    try {
        crmt::ExperimentConfig cfg = resolve_config(opt);
        crmt::CommandOverrides ov = resolve_overrides(opt);
        int code = 0;
        if (gen->parsed()) code = crmt::cmd_gen(cfg);
        else if (train->parsed()) code = crmt::cmd_train(cfg, opt.strategy);
        else if (certify->parsed()) code = crmt::cmd_certify(cfg, opt.strategy, ov);
        else if (attack->parsed()) code = crmt::cmd_attack(cfg, opt.strategy, ov);
        else if (oracle->parsed()) code = crmt::cmd_oracle(cfg, opt.strategy, ov);
        else if (report->parsed()) code = crmt::cmd_report(cfg);
        if (code == 3)
            std::cerr << "soundness violations detected; see the oracle report\n";
        return code;
    } catch (const crmt::DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const crmt::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
