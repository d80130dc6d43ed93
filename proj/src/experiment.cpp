#include "crmt/experiment.hpp"

#include "crmt/attack.hpp"
#include "crmt/certify.hpp"
#include "crmt/errors.hpp"
#include "crmt/prng.hpp"
#include "crmt/textio.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

namespace crmt {

using json = nlohmann::ordered_json;

namespace {

const std::vector<std::string> kStrategies = {"jt", "ojt", "crmt", "crmt-at"};

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot open '" + path.string() + "' for writing");
    out << content;
    if (!out) throw UsageError("write failed for '" + path.string() + "'");
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double quantile_of(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

} // namespace

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    unsigned hw = std::thread::hardware_concurrency();
    std::size_t workers = jobs > 0 ? static_cast<std::size_t>(jobs) : (hw ? hw : 1);
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

std::vector<std::size_t> parse_target(const std::string& name, std::size_t n_modalities) {
    if (name == "all") {
        std::vector<std::size_t> all(n_modalities);
        for (std::size_t m = 0; m < n_modalities; ++m) all[m] = m;
        return all;
    }
    if (name.size() >= 2 && name[0] == 'm') {
        std::size_t idx = 0;
        try {
            idx = std::stoul(name.substr(1));
        } catch (...) {
            throw ConfigError("bad attack target '" + name + "'");
        }
        if (idx < 1 || idx > n_modalities)
            throw ConfigError("attack target '" + name + "' is out of range");
        return {idx - 1};
    }
    throw ConfigError("bad attack target '" + name + "' (use \"all\" or \"m<k>\")");
}

// ---------------------------------------------------------------------------
// config

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig cfg;
    cfg.data.k = 3;
    cfg.data.dims = {8, 8};
    cfg.data.separation = {4.0, 1.5};
    cfg.data.noise_sigma = {1.0, 1.0};
    cfg.data.scale = {3.0, 1.0};
    cfg.data.n_train = 600;
    cfg.data.n_test = 300;
    cfg.data.seed = cfg.seed;
    cfg.train.at_spec = AttackSpec{AttackFamily::PgdL2, 1.5, 10, 0.0, {}, 0};
    cfg.attack.targets = cfg.default_targets();
    cfg.oracle.targets = cfg.default_targets();
    return cfg;
}

std::vector<std::string> ExperimentConfig::default_targets() const {
    std::vector<std::string> t{"all"};
    for (std::size_t m = 1; m <= data.dims.size(); ++m) t.push_back("m" + std::to_string(m));
    return t;
}

void ExperimentConfig::validate() const {
    data.validate();
    train.validate();
    if (!std::is_sorted(attack.epsilons.begin(), attack.epsilons.end()))
        throw ConfigError("attack.epsilons must be sorted ascending");
    for (double e : attack.epsilons)
        if (e < 0) throw ConfigError("attack.epsilons must be >= 0");
    if (attack.pgd_steps < 1) throw ConfigError("attack.pgd_steps must be >= 1");
    if (oracle.n_samples < 1) throw ConfigError("oracle.n_samples must be >= 1");
    if (oracle.tol <= 0) throw ConfigError("oracle.tol must be positive");
    if (oracle.tau_scale <= 0) throw ConfigError("oracle.tau_scale must be positive");
    for (const auto& t : attack.targets) parse_target(t, data.dims.size());
    for (const auto& t : oracle.targets) parse_target(t, data.dims.size());
    for (const auto& f : attack.families) {
        AttackFamily fam = attack_family_from_name(f);
        if (fam != AttackFamily::Fgm && fam != AttackFamily::PgdL2)
            throw ConfigError("attack.families supports fgm and pgd_l2 sweeps");
    }
    if (hidden.empty()) throw ConfigError("model.hidden must not be empty");
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig cfg = defaults();
    cfg.seed = j.value("seed", cfg.seed);
    cfg.data.seed = cfg.seed;
    if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
    cfg.jobs = j.value("jobs", cfg.jobs);

    if (j.contains("data")) {
        const json& d = j.at("data");
        cfg.preset = d.value("preset", cfg.preset);
        if (cfg.preset == "balanced") {
            cfg.data.separation = {4.0, 4.0};
            cfg.data.scale = {1.0, 1.0};
        } else if (cfg.preset != "skewed" && cfg.preset != "custom") {
            throw ConfigError("unknown data preset '" + cfg.preset + "'");
        }
        cfg.data.k = d.value("k", cfg.data.k);
        if (d.contains("dims")) cfg.data.dims = d.at("dims").get<std::vector<std::size_t>>();
        if (d.contains("separation"))
            cfg.data.separation = d.at("separation").get<std::vector<double>>();
        if (d.contains("noise_sigma"))
            cfg.data.noise_sigma = d.at("noise_sigma").get<std::vector<double>>();
        if (d.contains("scale")) cfg.data.scale = d.at("scale").get<std::vector<double>>();
        cfg.data.n_train = d.value("n_train", cfg.data.n_train);
        cfg.data.n_test = d.value("n_test", cfg.data.n_test);
        cfg.data.seed = d.value("seed", cfg.data.seed);
        // modality-count changes ripple into dependent defaults
        std::size_t n_mod = cfg.data.dims.size();
        auto resize_fill = [&](std::vector<double>& v, double fill) {
            if (v.size() < n_mod) v.resize(n_mod, fill);
        };
        resize_fill(cfg.data.separation, cfg.data.separation.empty() ? 4.0 : cfg.data.separation.back());
        resize_fill(cfg.data.noise_sigma, 1.0);
        resize_fill(cfg.data.scale, 1.0);
        cfg.attack.targets = cfg.default_targets();
        cfg.oracle.targets = cfg.default_targets();
    }

    if (j.contains("model")) {
        const json& m = j.at("model");
        if (m.contains("hidden")) cfg.hidden = m.at("hidden").get<std::vector<std::size_t>>();
        if (m.contains("activation"))
            cfg.activation = activation_from_name(m.at("activation").get<std::string>());
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        cfg.train.rho = t.value("rho", cfg.train.rho);
        cfg.train.lr_step1 = t.value("lr_step1", cfg.train.lr_step1);
        cfg.train.lr_step2 = t.value("lr_step2", cfg.train.lr_step2);
        cfg.train.epochs_step1 = t.value("epochs_step1", cfg.train.epochs_step1);
        cfg.train.epochs_step2 = t.value("epochs_step2", cfg.train.epochs_step2);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
        cfg.train.iterations = t.value("iterations", cfg.train.iterations);
        cfg.train.step2_valid_only = t.value("step2_valid_only", cfg.train.step2_valid_only);
        if (t.contains("optimizer"))
            cfg.train.optimizer = optimizer_from_name(t.at("optimizer").get<std::string>());
        if (t.contains("at")) {
            const json& a = t.at("at");
            AttackSpec at = *cfg.train.at_spec;
            if (a.contains("family"))
                at.family = attack_family_from_name(a.at("family").get<std::string>());
            at.epsilon = a.value("epsilon", at.epsilon);
            at.steps = a.value("steps", at.steps);
            at.step_size = a.value("step_size", at.step_size);
            cfg.train.at_spec = at;
        }
    }
    cfg.train.seed = derive_seed(cfg.seed, "train");

    if (j.contains("attack")) {
        const json& a = j.at("attack");
        if (a.contains("epsilons")) cfg.attack.epsilons = a.at("epsilons").get<std::vector<double>>();
        if (a.contains("families"))
            cfg.attack.families = a.at("families").get<std::vector<std::string>>();
        if (a.contains("targets"))
            cfg.attack.targets = a.at("targets").get<std::vector<std::string>>();
        cfg.attack.pgd_steps = a.value("pgd_steps", cfg.attack.pgd_steps);
        cfg.attack.include_missing = a.value("include_missing", cfg.attack.include_missing);
    }

    if (j.contains("oracle")) {
        const json& o = j.at("oracle");
        cfg.oracle.n_samples = o.value("n_samples", cfg.oracle.n_samples);
        cfg.oracle.tol = o.value("tol", cfg.oracle.tol);
        cfg.oracle.tau_scale = o.value("tau_scale", cfg.oracle.tau_scale);
        if (o.contains("targets"))
            cfg.oracle.targets = o.at("targets").get<std::vector<std::string>>();
    }

    cfg.validate();
    return cfg;
}

json ExperimentConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out"] = out.string();
    j["jobs"] = jobs;
    json d;
    d["preset"] = preset;
    d["k"] = data.k;
    d["dims"] = data.dims;
    d["separation"] = data.separation;
    d["noise_sigma"] = data.noise_sigma;
    d["scale"] = data.scale;
    d["n_train"] = data.n_train;
    d["n_test"] = data.n_test;
    d["seed"] = data.seed;
    j["data"] = d;
    json m;
    m["hidden"] = hidden;
    m["activation"] = activation_name(activation);
    j["model"] = m;
    json t;
    t["rho"] = train.rho;
    t["lr_step1"] = train.lr_step1;
    t["lr_step2"] = train.lr_step2;
    t["epochs_step1"] = train.epochs_step1;
    t["epochs_step2"] = train.epochs_step2;
    t["batch_size"] = train.batch_size;
    t["optimizer"] = optimizer_name(train.optimizer);
    t["iterations"] = train.iterations;
    t["step2_valid_only"] = train.step2_valid_only;
    t["seed"] = train.seed;
    if (train.at_spec) {
        json a;
        a["family"] = attack_family_name(train.at_spec->family);
        a["epsilon"] = train.at_spec->epsilon;
        a["steps"] = train.at_spec->steps;
        a["step_size"] = train.at_spec->step_size;
        t["at"] = a;
    }
    j["train"] = t;
    json a;
    a["epsilons"] = attack.epsilons;
    a["families"] = attack.families;
    a["targets"] = attack.targets;
    a["pgd_steps"] = attack.pgd_steps;
    a["include_missing"] = attack.include_missing;
    j["attack"] = a;
    json o;
    o["n_samples"] = oracle.n_samples;
    o["tol"] = oracle.tol;
    o["tau_scale"] = oracle.tau_scale;
    o["targets"] = oracle.targets;
    j["oracle"] = o;
    return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

std::filesystem::path ExperimentConfig::checkpoint_file(const std::string& s) const {
    return out / ("model_" + s + ".ckpt");
}
std::filesystem::path ExperimentConfig::trace_file(const std::string& s) const {
    return out / ("trace_" + s + ".csv");
}
std::filesystem::path ExperimentConfig::certificates_file(const std::string& s) const {
    return out / ("certificates_" + s + ".csv");
}
std::filesystem::path ExperimentConfig::eta_file(const std::string& s) const {
    return out / ("eta_ratio_" + s + ".csv");
}
std::filesystem::path ExperimentConfig::summary_file(const std::string& s) const {
    return out / ("summary_" + s + ".json");
}
std::filesystem::path ExperimentConfig::sweep_file(const std::string& s) const {
    return out / ("sweep_" + s + ".csv");
}
std::filesystem::path ExperimentConfig::oracle_json_file(const std::string& s) const {
    return out / ("oracle_" + s + ".json");
}
std::filesystem::path ExperimentConfig::oracle_csv_file(const std::string& s) const {
    return out / ("oracle_" + s + ".csv");
}

// ---------------------------------------------------------------------------
// commands

namespace {

void ensure_out_dir(const ExperimentConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec) throw UsageError("cannot create output directory '" + cfg.out.string() + "'");
}

ModelConfig model_config_for(const ExperimentConfig& cfg, const std::string& strategy) {
    ModelConfig mc;
    mc.modality_dims = cfg.data.dims;
    mc.hidden = cfg.hidden;
    mc.activation = cfg.activation;
    mc.k = cfg.data.k;
    mc.head = strategy == "jt" ? HeadKind::Standard : HeadKind::Orthogonal;
    return mc;
}

Dataset load_required(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw UsageError("missing input '" + path.string() + "' (run the gen command first?)");
    return load_dataset(path);
}

} // namespace

int cmd_gen(const ExperimentConfig& cfg) {
    ensure_out_dir(cfg);
    auto [train, test] = generate(cfg.data);
    save_dataset(train, cfg.train_file());
    save_dataset(test, cfg.test_file());
    write_text_file(cfg.manifest_file(), dump_json(cfg.to_json()));
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& strategy) {
    if (std::find(kStrategies.begin(), kStrategies.end(), strategy) == kStrategies.end())
        throw ConfigError("unknown strategy '" + strategy + "'");
    ensure_out_dir(cfg);
    Dataset train_ds = load_required(cfg.train_file());

    MultiModalModel model =
        init_model(model_config_for(cfg, strategy), derive_seed(cfg.seed, "model-init"));
    TrainTrace trace;
    train_strategy(strategy, model, train_ds, cfg.train, trace);

    save_model(model, cfg.checkpoint_file(strategy));
    std::string csv = "epoch,ce,l1,l2,mean_radius,clean_acc,orth_residual\n";
    for (const auto& r : trace.epochs) {
        csv += std::to_string(r.epoch);
        csv += ',' + fmt_double(r.ce) + ',' + fmt_double(r.l1) + ',' + fmt_double(r.l2);
        csv += ',' + fmt_double(r.mean_radius) + ',' + fmt_double(r.clean_acc);
        csv += ',' + fmt_double(r.orth_residual) + '\n';
    }
    write_text_file(cfg.trace_file(strategy), csv);
    return 0;
}

int cmd_certify(const ExperimentConfig& cfg, const std::string& strategy,
                const CommandOverrides& ov) {
    ensure_out_dir(cfg);
    MultiModalModel model = load_model(ov.checkpoint.value_or(cfg.checkpoint_file(strategy)));
    Dataset ds = load_required(ov.dataset.value_or(cfg.test_file()));
    if (ds.spec.k != model.k || ds.spec.dims != model.modality_dims())
        throw ShapeError("certify: checkpoint and dataset dimensions disagree");

    LipschitzInfo lip = lipschitz_upper_all(model);
    std::vector<CertificateReport> reports(ds.size());
    parallel_for(ds.size(), cfg.jobs, [&](std::size_t i) {
        reports[i] = certify(model, ds.sample(i), ds.labels[i], lip);
        reports[i].id = static_cast<int>(i);
    });

    const std::size_t n_mod = ds.n_modalities();
    std::string csv = "id,y,pred,valid,radius_mm";
    for (std::size_t m = 1; m <= n_mod; ++m) csv += ",radius_uni_m" + std::to_string(m);
    csv += ",binding_j";
    for (std::size_t m = 1; m <= n_mod; ++m) csv += ",eta_m" + std::to_string(m);
    csv += '\n';
    std::vector<double> valid_radii;
    std::size_t n_valid = 0;
    for (const auto& rep : reports) {
        csv += std::to_string(rep.id) + ',' + std::to_string(rep.label) + ',' +
               std::to_string(rep.predicted) + ',' + (rep.valid ? "1" : "0") + ',' +
               fmt_double(rep.radius_mm);
        for (double r : rep.radius_uni) csv += ',' + fmt_double(r);
        csv += ',' + std::to_string(rep.binding_class);
        for (double e : rep.eta) csv += ',' + fmt_double(e);
        csv += '\n';
        if (rep.valid) {
            ++n_valid;
            valid_radii.push_back(rep.radius_mm);
        }
    }
    write_text_file(cfg.certificates_file(strategy), csv);

    EtaReport eta = vulnerability_indicators(model, lip);
    std::string eta_csv;
    for (std::size_t r = 0; r < eta.ratio.rows(); ++r) {
        for (std::size_t c = 0; c < eta.ratio.cols(); ++c) {
            if (c) eta_csv += ',';
            eta_csv += fmt_double(eta.ratio(r, c));
        }
        eta_csv += '\n';
    }
    write_text_file(cfg.eta_file(strategy), eta_csv);

    double mean_radius = 0.0;
    for (double r : valid_radii) mean_radius += r;
    if (n_valid) mean_radius /= static_cast<double>(n_valid);

    json summary;
    summary["strategy"] = strategy;
    summary["bound"] = model.is_orthogonal() ? "orthogonal" : "standard";
    summary["n"] = ds.size();
    summary["n_valid"] = n_valid;
    summary["clean_accuracy"] = static_cast<double>(n_valid) / static_cast<double>(ds.size());
    summary["mean_certified_radius"] = mean_radius;
    summary["median_certified_radius"] = median_of(valid_radii);
    summary["eta_ratio_geomean_dev"] = eta_ratio_geomean_deviation(eta.ratio);
    write_text_file(cfg.summary_file(strategy), dump_json(summary));
    return 0;
}

int cmd_attack(const ExperimentConfig& cfg, const std::string& strategy,
               const CommandOverrides& ov) {
    ensure_out_dir(cfg);
    if (cfg.attack.epsilons.empty()) throw ConfigError("attack: empty epsilon grid");
    MultiModalModel model = load_model(ov.checkpoint.value_or(cfg.checkpoint_file(strategy)));
    Dataset ds = load_required(ov.dataset.value_or(cfg.test_file()));

    std::string csv = "epsilon,family,target,accuracy,n_samples\n";
    auto accuracy_under = [&](const std::string& family, const std::string& target,
                              double epsilon) {
        std::vector<std::size_t> targets = parse_target(target, ds.n_modalities());
        std::vector<char> correct(ds.size(), 0);
        parallel_for(ds.size(), cfg.jobs, [&](std::size_t i) {
            AttackSpec spec;
            spec.family = attack_family_from_name(family);
            spec.epsilon = epsilon;
            spec.steps = cfg.attack.pgd_steps;
            spec.targets = targets;
            spec.seed = derive_seed(cfg.seed, "attack-sweep", i);
            AttackResult res = run_attack(model, ds.sample(i), ds.labels[i], spec);
            correct[i] = res.success ? 0 : 1;
        });
        std::size_t n_correct = 0;
        for (char c : correct) n_correct += c;
        return static_cast<double>(n_correct) / static_cast<double>(ds.size());
    };

    for (const auto& family : cfg.attack.families)
        for (const auto& target : cfg.attack.targets)
            for (double eps : cfg.attack.epsilons) {
                double acc = accuracy_under(family, target, eps);
                csv += fmt_double(eps) + ',' + family + ',' + target + ',' + fmt_double(acc) +
                       ',' + std::to_string(ds.size()) + '\n';
            }
    if (cfg.attack.include_missing)
        for (std::size_t m = 1; m <= ds.n_modalities(); ++m) {
            std::string target = "m" + std::to_string(m);
            double acc = accuracy_under("missing", target, 0.0);
            csv += "0,missing," + target + ',' + fmt_double(acc) + ',' +
                   std::to_string(ds.size()) + '\n';
        }
    write_text_file(cfg.sweep_file(strategy), csv);
    return 0;
}

int cmd_oracle(const ExperimentConfig& cfg, const std::string& strategy,
               const CommandOverrides& ov) {
    ensure_out_dir(cfg);
    MultiModalModel model = load_model(ov.checkpoint.value_or(cfg.checkpoint_file(strategy)));
    Dataset ds = load_required(ov.dataset.value_or(cfg.test_file()));

    std::size_t n_requested = ov.oracle_samples.value_or(cfg.oracle.n_samples);
    double tol = ov.oracle_tol.value_or(cfg.oracle.tol);
    double tau_scale = ov.tau_scale.value_or(cfg.oracle.tau_scale);

    LipschitzInfo lip = lipschitz_upper_all(model);
    lip.scale_by(tau_scale);

    // first n correctly classified samples
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.size() && pool.size() < n_requested; ++i)
        if (predict(model, ds.sample(i)) == ds.labels[i]) pool.push_back(i);

    struct Row {
        std::size_t id;
        std::string target;
        double certified;
        double oracle;
        double slack;
    };
    std::vector<std::vector<Row>> rows_per_sample(pool.size());
    parallel_for(pool.size(), cfg.jobs, [&](std::size_t p) {
        std::size_t i = pool[p];
        auto xs = ds.sample(i);
        CertificateReport rep = certify(model, xs, ds.labels[i], lip);
        for (const auto& target : cfg.oracle.targets) {
            auto targets = parse_target(target, ds.n_modalities());
            double certified =
                target == "all" ? rep.radius_mm : rep.radius_uni[targets[0]];
            double oracle = min_radius_oracle(model, xs, ds.labels[i], targets, tol,
                                              derive_seed(cfg.seed, "oracle", i));
            Row row;
            row.id = i;
            row.target = target;
            row.certified = certified;
            row.oracle = oracle;
            row.slack = oracle - certified;
            rows_per_sample[p].push_back(std::move(row));
        }
    });

    std::string csv = "id,target,certified,oracle,slack\n";
    json violations = json::array();
    std::vector<double> finite_slacks;
    std::size_t unbounded = 0;
    std::size_t violation_count = 0;
    for (const auto& rows : rows_per_sample)
        for (const auto& row : rows) {
            csv += std::to_string(row.id) + ',' + row.target + ',' + fmt_double(row.certified) +
                   ',' + fmt_double(row.oracle) + ',' + fmt_double(row.slack) + '\n';
            if (std::isinf(row.oracle)) {
                ++unbounded;
            } else {
                finite_slacks.push_back(row.slack);
            }
            if (row.certified > row.oracle + 1e-6) {
                ++violation_count;
                json v;
                v["id"] = row.id;
                v["target"] = row.target;
                v["certified"] = row.certified;
                v["oracle"] = row.oracle;
                v["slack"] = row.slack;
                violations.push_back(v);
            }
        }
    write_text_file(cfg.oracle_csv_file(strategy), csv);

    json report;
    report["strategy"] = strategy;
    report["n_requested"] = n_requested;
    report["n_evaluated"] = pool.size();
    report["tol"] = tol;
    report["tau_scale"] = tau_scale;
    report["targets"] = cfg.oracle.targets;
    report["soundness_violations"] = violation_count;
    report["violations"] = violations;
    report["unbounded_oracle_count"] = unbounded;
    json q;
    q["min"] = finite_slacks.empty() ? 0.0 : quantile_of(finite_slacks, 0.0);
    q["q25"] = quantile_of(finite_slacks, 0.25);
    q["median"] = quantile_of(finite_slacks, 0.5);
    q["q75"] = quantile_of(finite_slacks, 0.75);
    q["max"] = finite_slacks.empty() ? 0.0 : quantile_of(finite_slacks, 1.0);
    report["slack_quantiles"] = q;
    write_text_file(cfg.oracle_json_file(strategy), dump_json(report));

    return violation_count == 0 ? 0 : 3;
}

namespace {

struct SweepRow {
    double epsilon;
    std::string family;
    std::string target;
    double accuracy;
};

std::vector<SweepRow> read_sweep(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open '" + path.string() + "'");
    std::string line;
    std::getline(in, line); // header
    std::vector<SweepRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 5) throw ParseError("sweep file: bad row '" + line + "'");
        SweepRow row;
        row.epsilon = parse_double(f[0], "sweep");
        row.family = std::string(f[1]);
        row.target = std::string(f[2]);
        row.accuracy = parse_double(f[3], "sweep");
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace

int cmd_report(const ExperimentConfig& cfg) {
    if (!std::filesystem::exists(cfg.manifest_file()))
        throw UsageError("report: missing '" + cfg.manifest_file().string() +
                         "' (run the gen command first)");
    json report;
    {
        std::ifstream in(cfg.manifest_file());
        json manifest;
        in >> manifest;
        report["config"] = manifest;
    }
    json missing = json::array();
    json strategies;
    std::size_t total_violations = 0;
    bool any_oracle = false;

    for (const auto& s : kStrategies) {
        bool have_any = false;
        json entry;
        if (std::filesystem::exists(cfg.summary_file(s))) {
            std::ifstream in(cfg.summary_file(s));
            json summary;
            in >> summary;
            entry["certification"] = summary;
            have_any = true;
        } else {
            missing.push_back(cfg.summary_file(s).filename().string());
        }
        if (std::filesystem::exists(cfg.sweep_file(s))) {
            auto rows = read_sweep(cfg.sweep_file(s));
            have_any = true;
            // per-epsilon accuracies of the two single-modality attacks
            std::string gap_csv = "epsilon,acc_m1,acc_m2,gap\n";
            double max_abs_gap = 0.0;
            for (double eps : cfg.attack.epsilons) {
                double acc1 = -1.0, acc2 = -1.0;
                for (const auto& row : rows) {
                    if (row.family != "pgd_l2" || row.epsilon != eps) continue;
                    if (row.target == "m1") acc1 = row.accuracy;
                    if (row.target == "m2") acc2 = row.accuracy;
                }
                if (acc1 < 0 || acc2 < 0) continue;
                double gap = acc1 - acc2;
                max_abs_gap = std::max(max_abs_gap, std::fabs(gap));
                gap_csv += fmt_double(eps) + ',' + fmt_double(acc1) + ',' + fmt_double(acc2) +
                           ',' + fmt_double(gap) + '\n';
            }
            write_text_file(cfg.out / ("gap_" + s + ".csv"), gap_csv);
            entry["max_abs_unimodal_gap"] = max_abs_gap;
            json sweep = json::array();
            for (const auto& row : rows) {
                json r;
                r["epsilon"] = row.epsilon;
                r["family"] = row.family;
                r["target"] = row.target;
                r["accuracy"] = row.accuracy;
                sweep.push_back(r);
            }
            entry["attack_sweep"] = sweep;
        } else {
            missing.push_back(cfg.sweep_file(s).filename().string());
        }
        if (std::filesystem::exists(cfg.oracle_json_file(s))) {
            std::ifstream in(cfg.oracle_json_file(s));
            json oracle;
            in >> oracle;
            entry["oracle"] = oracle;
            total_violations += oracle.value("soundness_violations", 0);
            any_oracle = true;
            have_any = true;
        } else {
            missing.push_back(cfg.oracle_json_file(s).filename().string());
        }
        if (have_any) strategies[s] = entry;
    }
    report["strategies"] = strategies;
    report["soundness_violations"] = total_violations;
    report["oracle_present"] = any_oracle;
    report["missing_inputs"] = missing;
    write_text_file(cfg.out / "report.json", dump_json(report));
    return 0;
}

} // namespace crmt
