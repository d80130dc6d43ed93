#pragma once

#include "crmt/dataset.hpp"
#include "crmt/model.hpp"
#include "crmt/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace crmt {

// Config-driven experiment pipeline shared by the CLI and the language
// bindings. Every command is a pure function of (config, files on disk);
// rerunning one reproduces its outputs byte for byte.

struct AttackGridConfig {
    std::vector<double> epsilons{0.3, 0.75, 1.5, 3.0, 6.0};
    std::vector<std::string> families{"fgm", "pgd_l2"};
    std::vector<std::string> targets; // default: "all" plus each modality
    int pgd_steps = 20;
    bool include_missing = true;
};

struct OracleConfig {
    std::size_t n_samples = 500;
    double tol = 1e-3;
    double tau_scale = 1.0; // < 1 deliberately breaks soundness (negative control)
    std::vector<std::string> targets;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::filesystem::path out = "runs/exp";
    int jobs = 0; // 0 = hardware concurrency

    std::string preset = "skewed";
    GenSpec data;
    std::vector<std::size_t> hidden{32, 32};
    Activation activation = Activation::Tanh;
    TrainConfig train;
    AttackGridConfig attack;
    OracleConfig oracle;

    static ExperimentConfig defaults();
    static ExperimentConfig from_json(const nlohmann::ordered_json& j);
    nlohmann::ordered_json to_json() const; // all defaults materialized

    void validate() const;
    std::vector<std::string> default_targets() const;

    std::filesystem::path train_file() const { return out / "train.ds"; }
    std::filesystem::path test_file() const { return out / "test.ds"; }
    std::filesystem::path manifest_file() const { return out / "manifest.json"; }
    std::filesystem::path checkpoint_file(const std::string& strategy) const;
    std::filesystem::path trace_file(const std::string& strategy) const;
    std::filesystem::path certificates_file(const std::string& strategy) const;
    std::filesystem::path eta_file(const std::string& strategy) const;
    std::filesystem::path summary_file(const std::string& strategy) const;
    std::filesystem::path sweep_file(const std::string& strategy) const;
    std::filesystem::path oracle_json_file(const std::string& strategy) const;
    std::filesystem::path oracle_csv_file(const std::string& strategy) const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

struct CommandOverrides {
    std::optional<std::filesystem::path> checkpoint;
    std::optional<std::filesystem::path> dataset;
    std::optional<std::size_t> oracle_samples;
    std::optional<double> oracle_tol;
    std::optional<double> tau_scale;
};

// Exit codes: 0 success, 1 usage/config, 2 divergence, 3 soundness violation.
int cmd_gen(const ExperimentConfig& cfg);
int cmd_train(const ExperimentConfig& cfg, const std::string& strategy);
int cmd_certify(const ExperimentConfig& cfg, const std::string& strategy,
                const CommandOverrides& ov = {});
int cmd_attack(const ExperimentConfig& cfg, const std::string& strategy,
               const CommandOverrides& ov = {});
int cmd_oracle(const ExperimentConfig& cfg, const std::string& strategy,
               const CommandOverrides& ov = {});
int cmd_report(const ExperimentConfig& cfg);

// Deterministic parallel map: fn(i) must only touch slot i of its outputs.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

std::vector<std::size_t> parse_target(const std::string& name, std::size_t n_modalities);

} // namespace crmt
