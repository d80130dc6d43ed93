#include "crmt/attack.hpp"
#include "crmt/certify.hpp"
#include "crmt/dataset.hpp"
#include "crmt/errors.hpp"
#include "crmt/experiment.hpp"
#include "crmt/model.hpp"
#include "crmt/train.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

namespace py = pybind11;

namespace {

using crmt::Matrix;

Matrix row_from_list(const std::vector<double>& v) { return Matrix::row_vector(v); }

std::vector<Matrix> sample_from_lists(const std::vector<std::vector<double>>& xs) {
    std::vector<Matrix> out;
    out.reserve(xs.size());
    for (const auto& v : xs) out.push_back(row_from_list(v));
    return out;
}

std::vector<std::vector<double>> sample_to_lists(const std::vector<Matrix>& xs) {
    std::vector<std::vector<double>> out;
    for (const auto& m : xs)
        out.emplace_back(m.data(), m.data() + m.size());
    return out;
}

crmt::ExperimentConfig config_from_json_str(const std::string& config_json) {
    return crmt::ExperimentConfig::from_json(nlohmann::ordered_json::parse(config_json));
}

py::dict certificate_to_dict(const crmt::CertificateReport& rep) {
    py::dict d;
    d["id"] = rep.id;
    d["label"] = rep.label;
    d["predicted"] = rep.predicted;
    d["valid"] = rep.valid;
    d["radius_mm"] = rep.radius_mm;
    d["radius_uni"] = rep.radius_uni;
    d["binding_class"] = rep.binding_class;
    d["eta"] = rep.eta;
    d["signed_radius"] = rep.signed_radius;
    return d;
}

crmt::AttackSpec spec_from_args(const std::string& family, double epsilon, int steps,
                                double step_size, const std::vector<std::size_t>& targets,
                                std::uint64_t seed) {
    crmt::AttackSpec spec;
    spec.family = crmt::attack_family_from_name(family);
    spec.epsilon = epsilon;
    spec.steps = steps;
    spec.step_size = step_size;
    spec.targets = targets;
    spec.seed = seed;
    return spec;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Certified-robustness laboratory for multi-modal classifiers";

    py::register_exception<crmt::Error>(m, "CrmtError");

    py::class_<crmt::Dataset>(m, "Dataset")
        .def_static("load", &crmt::load_dataset, py::arg("path"))
        .def("save", [](const crmt::Dataset& ds, const std::filesystem::path& p) {
            crmt::save_dataset(ds, p);
        })
        .def("__len__", [](const crmt::Dataset& ds) { return ds.size(); })
        .def_property_readonly("k", [](const crmt::Dataset& ds) { return ds.spec.k; })
        .def_property_readonly("dims", [](const crmt::Dataset& ds) { return ds.spec.dims; })
        .def_property_readonly("labels", [](const crmt::Dataset& ds) { return ds.labels; })
        .def("sample", [](const crmt::Dataset& ds, std::size_t i) {
            if (i >= ds.size()) throw py::index_error();
            return py::make_tuple(sample_to_lists(ds.sample(i)), ds.labels[i]);
        });

    m.def(
        "generate",
        [](int k, const std::vector<std::size_t>& dims, const std::vector<double>& separation,
           const std::vector<double>& noise_sigma, const std::vector<double>& scale,
           std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
            crmt::GenSpec spec;
            spec.k = k;
            spec.dims = dims;
            spec.separation = separation;
            spec.noise_sigma = noise_sigma;
            spec.scale = scale;
            spec.n_train = n_train;
            spec.n_test = n_test;
            spec.seed = seed;
            auto [train, test] = crmt::generate(spec);
            return py::make_tuple(train, test);
        },
        py::arg("k"), py::arg("dims"), py::arg("separation"), py::arg("noise_sigma"),
        py::arg("scale"), py::arg("n_train"), py::arg("n_test"), py::arg("seed"));

    py::class_<crmt::MultiModalModel>(m, "Model")
        .def_static("load", &crmt::load_model, py::arg("path"))
        .def("save", [](const crmt::MultiModalModel& model, const std::filesystem::path& p) {
            crmt::save_model(model, p);
        })
        .def_property_readonly("k", [](const crmt::MultiModalModel& m_) { return m_.k; })
        .def_property_readonly("is_orthogonal",
                               [](const crmt::MultiModalModel& m_) { return m_.is_orthogonal(); })
        .def_property_readonly("modality_dims",
                               [](const crmt::MultiModalModel& m_) { return m_.modality_dims(); })
        .def("predict",
             [](const crmt::MultiModalModel& model, const std::vector<std::vector<double>>& xs) {
                 return crmt::predict(model, sample_from_lists(xs));
             })
        .def("logits",
             [](const crmt::MultiModalModel& model, const std::vector<std::vector<double>>& xs) {
                 Matrix l = crmt::forward(model, sample_from_lists(xs)).logits;
                 return std::vector<double>(l.data(), l.data() + l.size());
             });

    m.def(
        "init_model",
        [](const std::vector<std::size_t>& dims, const std::vector<std::size_t>& hidden,
           const std::string& activation, int k, const std::string& head, std::uint64_t seed) {
            crmt::ModelConfig mc;
            mc.modality_dims = dims;
            mc.hidden = hidden;
            mc.activation = crmt::activation_from_name(activation);
            mc.k = k;
            mc.head = head == "standard" ? crmt::HeadKind::Standard : crmt::HeadKind::Orthogonal;
            return crmt::init_model(mc, seed);
        },
        py::arg("dims"), py::arg("hidden"), py::arg("activation"), py::arg("k"),
        py::arg("head"), py::arg("seed"));

    m.def(
        "train",
        [](crmt::MultiModalModel& model, const crmt::Dataset& ds, const std::string& strategy,
           double rho, double lr_step1, double lr_step2, int epochs_step1, int epochs_step2,
           std::size_t batch_size, std::uint64_t seed, const std::string& optimizer,
           double at_epsilon, int at_steps) {
            crmt::TrainConfig cfg;
            cfg.rho = rho;
            cfg.lr_step1 = lr_step1;
            cfg.lr_step2 = lr_step2;
            cfg.epochs_step1 = epochs_step1;
            cfg.epochs_step2 = epochs_step2;
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            cfg.optimizer = crmt::optimizer_from_name(optimizer);
            cfg.at_spec = crmt::AttackSpec{crmt::AttackFamily::PgdL2, at_epsilon, at_steps,
                                           0.0, {}, 0};
            crmt::TrainTrace trace;
            crmt::train_strategy(strategy, model, ds, cfg, trace);
            py::list rows;
            for (const auto& r : trace.epochs) {
                py::dict row;
                row["epoch"] = r.epoch;
                row["ce"] = r.ce;
                row["l1"] = r.l1;
                row["l2"] = r.l2;
                row["mean_radius"] = r.mean_radius;
                row["clean_acc"] = r.clean_acc;
                row["orth_residual"] = r.orth_residual;
                rows.append(row);
            }
            return rows;
        },
        py::arg("model"), py::arg("dataset"), py::arg("strategy"), py::arg("rho") = 0.5,
        py::arg("lr_step1") = 0.05, py::arg("lr_step2") = 0.01, py::arg("epochs_step1") = 100,
        py::arg("epochs_step2") = 30, py::arg("batch_size") = 64, py::arg("seed") = 1,
        py::arg("optimizer") = "sgd_momentum", py::arg("at_epsilon") = 1.5,
        py::arg("at_steps") = 10);

    m.def(
        "certify",
        [](const crmt::MultiModalModel& model, const std::vector<std::vector<double>>& xs,
           int y) {
            crmt::LipschitzInfo lip = crmt::lipschitz_upper_all(model);
            return certificate_to_dict(crmt::certify(model, sample_from_lists(xs), y, lip));
        },
        py::arg("model"), py::arg("sample"), py::arg("label"));

    m.def(
        "attack",
        [](const crmt::MultiModalModel& model, const std::vector<std::vector<double>>& xs, int y,
           const std::string& family, double epsilon, int steps, double step_size,
           const std::vector<std::size_t>& targets, std::uint64_t seed) {
            crmt::AttackResult res = crmt::run_attack(
                model, sample_from_lists(xs), y,
                spec_from_args(family, epsilon, steps, step_size, targets, seed));
            py::dict d;
            d["x"] = sample_to_lists(res.x);
            d["success"] = res.success;
            d["norms"] = res.norms;
            d["total_norm"] = res.total_norm;
            d["zero_gradient"] = res.zero_gradient;
            return d;
        },
        py::arg("model"), py::arg("sample"), py::arg("label"), py::arg("family"),
        py::arg("epsilon"), py::arg("steps") = 20, py::arg("step_size") = 0.0,
        py::arg("targets") = std::vector<std::size_t>{}, py::arg("seed") = 0);

    m.def(
        "min_radius_oracle",
        [](const crmt::MultiModalModel& model, const std::vector<std::vector<double>>& xs, int y,
           const std::vector<std::size_t>& targets, double tol, std::uint64_t seed) {
            return crmt::min_radius_oracle(model, sample_from_lists(xs), y, targets, tol, seed);
        },
        py::arg("model"), py::arg("sample"), py::arg("label"),
        py::arg("targets") = std::vector<std::size_t>{}, py::arg("tol") = 1e-3,
        py::arg("seed") = 0);

    m.def("lipschitz_upper", [](const crmt::MultiModalModel& model) {
        return crmt::lipschitz_upper_all(model).encoder_lip;
    });

    m.def("default_config_json",
          [] { return crmt::ExperimentConfig::defaults().to_json().dump(2); });
    m.def("run_gen",
          [](const std::string& cfg) { return crmt::cmd_gen(config_from_json_str(cfg)); });
    m.def("run_train", [](const std::string& cfg, const std::string& strategy) {
        return crmt::cmd_train(config_from_json_str(cfg), strategy);
    });
    m.def("run_certify", [](const std::string& cfg, const std::string& strategy) {
        return crmt::cmd_certify(config_from_json_str(cfg), strategy);
    });
    m.def("run_attack", [](const std::string& cfg, const std::string& strategy) {
        return crmt::cmd_attack(config_from_json_str(cfg), strategy);
    });
    m.def(
        "run_oracle",
        [](const std::string& cfg, const std::string& strategy, std::size_t n_samples,
           double tau_scale) {
            crmt::CommandOverrides ov;
            if (n_samples) ov.oracle_samples = n_samples;
            if (tau_scale > 0.0) ov.tau_scale = tau_scale;
            return crmt::cmd_oracle(config_from_json_str(cfg), strategy, ov);
        },
        py::arg("config"), py::arg("strategy"), py::arg("n_samples") = 0,
        py::arg("tau_scale") = 0.0);
    m.def("run_report",
          [](const std::string& cfg) { return crmt::cmd_report(config_from_json_str(cfg)); });
}
