#include "crmt/train.hpp"

#include "crmt/errors.hpp"
#include "crmt/prng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace crmt {

std::string optimizer_name(Optimizer o) {
    return o == Optimizer::Sgd ? "sgd" : "sgd_momentum";
}

Optimizer optimizer_from_name(const std::string& name) {
    if (name == "sgd") return Optimizer::Sgd;
    if (name == "sgd_momentum") return Optimizer::SgdMomentum;
    throw ConfigError("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
    if (rho < 0) throw ConfigError("train: rho must be >= 0");
    if (lr_step1 <= 0 || lr_step2 <= 0) throw ConfigError("train: learning rates must be positive");
    if (epochs_step1 < 1 || epochs_step2 < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (iterations < 1) throw ConfigError("train: iterations must be >= 1");
    if (at_spec && at_spec->family != AttackFamily::PgdL2 && at_spec->family != AttackFamily::Fgm)
        throw ConfigError("train: adversarial training supports pgd_l2 or fgm");
}

double loss_ce(const Matrix& logits, const std::vector<int>& labels) {
    if (logits.rows() != labels.size())
        throw ShapeError("loss_ce: one label per row required");
    double total = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        double m = logits(r, 0);
        for (std::size_t c = 1; c < logits.cols(); ++c) m = std::max(m, logits(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < logits.cols(); ++c) s += std::exp(logits(r, c) - m);
        total += std::log(s) - (logits(r, static_cast<std::size_t>(labels[r])) - m);
    }
    return total / static_cast<double>(logits.rows());
}

double loss_l1(const std::vector<Matrix>& scores, const std::vector<int>& labels) {
    if (scores.empty()) throw UsageError("loss_l1: need at least one modality");
    const std::size_t n = scores[0].rows();
    const std::size_t k = scores[0].cols();
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t y = static_cast<std::size_t>(labels[r]);
        // log sum_m sum_{k != y} exp(s_k - s_y), LogSumExp-stabilized
        double mx = -std::numeric_limits<double>::infinity();
        for (const auto& s : scores)
            for (std::size_t c = 0; c < k; ++c)
                if (c != y) mx = std::max(mx, s(r, c) - s(r, y));
        double acc = 0.0;
        for (const auto& s : scores)
            for (std::size_t c = 0; c < k; ++c)
                if (c != y) acc += std::exp(s(r, c) - s(r, y) - mx);
        total += mx + std::log(acc);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// loss tapes

namespace {

std::string enc_w_name(std::size_t m, std::size_t l) {
    return "e" + std::to_string(m + 1) + "_w" + std::to_string(l + 1);
}
std::string enc_b_name(std::size_t m, std::size_t l) {
    return "e" + std::to_string(m + 1) + "_b" + std::to_string(l + 1);
}
std::string x_name(std::size_t m) { return "x" + std::to_string(m + 1); }
std::string a_name(std::size_t m) { return "a" + std::to_string(m + 1); }
std::string head_w_name(std::size_t m) { return "hw" + std::to_string(m + 1); }
std::string orth_w_name(std::size_t m) { return "ow" + std::to_string(m + 1); }

// Encoder stack with trainable parameters; returns the embedding node.
NodeId build_encoder(LossTape& lt, const Encoder& enc, std::size_t m, std::size_t batch) {
    NodeId h = lt.tape.input(x_name(m), batch, enc.input_dim());
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
        const auto& layer = enc.layers[l];
        NodeId w = lt.tape.var(enc_w_name(m, l), layer.weight.rows(), layer.weight.cols());
        NodeId b = lt.tape.var(enc_b_name(m, l), 1, layer.bias.cols());
        lt.param_names.push_back(enc_w_name(m, l));
        lt.param_names.push_back(enc_b_name(m, l));
        h = lt.tape.add(lt.tape.matmul(h, w), b);
        switch (layer.act) {
            case Activation::Relu: h = lt.tape.relu(h); break;
            case Activation::Tanh: h = lt.tape.tanh(h); break;
            case Activation::Identity: break;
        }
    }
    return h;
}

} // namespace

LossTape build_ce_tape(const MultiModalModel& model, std::size_t batch) {
    LossTape lt;
    const std::size_t k = static_cast<std::size_t>(model.k);
    std::vector<NodeId> phis;
    for (std::size_t m = 0; m < model.modalities(); ++m)
        phis.push_back(build_encoder(lt, model.encoders[m], m, batch));
    NodeId labels = lt.tape.input("y", batch, 1);

    NodeId logits = -1;
    if (model.is_orthogonal()) {
        const auto& head = model.orthogonal_head();
        for (std::size_t m = 0; m < phis.size(); ++m) {
            NodeId w = lt.tape.var(orth_w_name(m), k, head.w_rows[m].cols());
            NodeId a = lt.tape.var(a_name(m), k, 1);
            lt.param_names.push_back(orth_w_name(m));
            lt.param_names.push_back(a_name(m));
            NodeId s = lt.tape.matmul(phis[m], lt.tape.transpose(w));
            NodeId weighted = lt.tape.colscale(s, a);
            logits = logits < 0 ? weighted : lt.tape.add(logits, weighted);
        }
        logits = lt.tape.add(logits, lt.tape.constant(head.bias));
    } else {
        const auto& head = model.standard_head();
        for (std::size_t m = 0; m < phis.size(); ++m) {
            NodeId w = lt.tape.var(head_w_name(m), k, head.w_parts[m].cols());
            lt.param_names.push_back(head_w_name(m));
            NodeId part = lt.tape.matmul(phis[m], lt.tape.transpose(w));
            logits = logits < 0 ? part : lt.tape.add(logits, part);
        }
        NodeId b = lt.tape.var("hb", 1, k);
        lt.param_names.push_back("hb");
        logits = lt.tape.add(logits, b);
    }
    lt.ce_node = lt.tape.softmax_cross_entropy(logits, labels);
    lt.loss = lt.ce_node;
    lt.tape.set_output(lt.loss);
    return lt;
}

LossTape build_step1_tape(const MultiModalModel& model, std::size_t batch, double rho) {
    const auto& head = model.orthogonal_head();
    LossTape lt;
    const std::size_t k = static_cast<std::size_t>(model.k);
    const std::size_t n_mod = model.modalities();

    std::vector<NodeId> phis;
    for (std::size_t m = 0; m < n_mod; ++m)
        phis.push_back(build_encoder(lt, model.encoders[m], m, batch));
    NodeId labels = lt.tape.input("y", batch, 1);

    std::vector<NodeId> raw_scores;
    NodeId logits = -1;
    for (std::size_t m = 0; m < n_mod; ++m) {
        NodeId w = lt.tape.var(orth_w_name(m), k, head.w_rows[m].cols());
        NodeId a = lt.tape.var(a_name(m), k, 1);
        lt.param_names.push_back(orth_w_name(m));
        lt.param_names.push_back(a_name(m));
        NodeId s = lt.tape.matmul(phis[m], lt.tape.transpose(w));
        raw_scores.push_back(s);
        NodeId weighted = lt.tape.colscale(s, a);
        logits = logits < 0 ? weighted : lt.tape.add(logits, weighted);
    }
    logits = lt.tape.add(logits, lt.tape.constant(head.bias));
    lt.ce_node = lt.tape.softmax_cross_entropy(logits, labels);

    // margin penalty: per-modality margin terms stacked as columns, then a
    // row-wise LogSumExp couples the modalities
    NodeId stacked = -1;
    for (std::size_t m = 0; m < n_mod; ++m) {
        NodeId t = lt.tape.margin_logsumexp(raw_scores[m], labels);
        Matrix unit(1, n_mod);
        unit(0, m) = 1.0;
        NodeId col = lt.tape.matmul(t, lt.tape.constant(unit));
        stacked = stacked < 0 ? col : lt.tape.add(stacked, col);
    }
    NodeId per_sample = lt.tape.logsumexp(stacked);
    lt.l1_node = lt.tape.scale(lt.tape.sum(per_sample), 1.0 / static_cast<double>(batch));

    lt.loss = lt.tape.add(lt.tape.scale(lt.l1_node, rho), lt.ce_node);
    lt.tape.set_output(lt.loss);
    return lt;
}

LossTape build_step2_tape(const std::vector<Step2Sample>& batch,
                          const std::vector<Matrix>& tau_class, const Matrix& head_bias) {
    if (batch.empty()) throw UsageError("build_step2_tape: empty batch");
    const std::size_t n_mod = tau_class.size();
    const std::size_t k = tau_class[0].rows();

    LossTape lt;
    std::vector<NodeId> a_vars;
    for (std::size_t m = 0; m < n_mod; ++m) {
        a_vars.push_back(lt.tape.var(a_name(m), k, 1));
        lt.param_names.push_back(a_name(m));
    }

    NodeId total = -1;
    for (const auto& sample : batch) {
        std::size_t y = static_cast<std::size_t>(sample.y);
        std::size_t j = static_cast<std::size_t>(sample.j);
        double beta = head_bias(0, y) - head_bias(0, j);

        NodeId num = lt.tape.constant(Matrix(1, 1, beta));
        NodeId den_stack = -1;
        for (std::size_t m = 0; m < n_mod; ++m) {
            NodeId ay = lt.tape.row_select(a_vars[m], y);
            NodeId aj = lt.tape.row_select(a_vars[m], j);
            num = lt.tape.add(num, lt.tape.scale(ay, sample.scores(m, y)));
            num = lt.tape.add(num, lt.tape.scale(aj, -sample.scores(m, j)));

            NodeId w = lt.tape.add(lt.tape.scale(ay, tau_class[m](y, 0)),
                                   lt.tape.scale(aj, tau_class[m](j, 0)));
            Matrix unit(1, n_mod);
            unit(0, m) = 1.0;
            NodeId col = lt.tape.matmul(w, lt.tape.constant(unit));
            den_stack = den_stack < 0 ? col : lt.tape.add(den_stack, col);
        }
        NodeId bound = lt.tape.div(num, lt.tape.l2_norm(den_stack));
        total = total < 0 ? bound : lt.tape.add(total, bound);
    }
    lt.loss = lt.tape.scale(total, -1.0 / static_cast<double>(batch.size()));
    lt.tape.set_output(lt.loss);
    return lt;
}

// ---------------------------------------------------------------------------
// training loops

namespace {

std::vector<std::pair<std::string, Matrix*>> collect_params(MultiModalModel& model,
                                                            bool include_head) {
    std::vector<std::pair<std::string, Matrix*>> params;
    for (std::size_t m = 0; m < model.modalities(); ++m)
        for (std::size_t l = 0; l < model.encoders[m].layers.size(); ++l) {
            params.emplace_back(enc_w_name(m, l), &model.encoders[m].layers[l].weight);
            params.emplace_back(enc_b_name(m, l), &model.encoders[m].layers[l].bias);
        }
    if (!include_head) return params;
    if (model.is_orthogonal()) {
        auto& head = model.orthogonal_head();
        for (std::size_t m = 0; m < head.w_rows.size(); ++m) {
            params.emplace_back(orth_w_name(m), &head.w_rows[m]);
            params.emplace_back(a_name(m), &head.a[m]);
        }
    } else {
        auto& head = model.standard_head();
        for (std::size_t m = 0; m < head.w_parts.size(); ++m)
            params.emplace_back(head_w_name(m), &head.w_parts[m]);
        params.emplace_back("hb", &head.bias);
    }
    return params;
}

class SgdUpdater {
public:
    SgdUpdater(Optimizer kind, double lr) : kind_(kind), lr_(lr) {}

    void apply(const std::string& name, Matrix& param, const Matrix& grad) {
        if (kind_ == Optimizer::Sgd) {
            for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr_ * grad[i];
            return;
        }
        Matrix& v = velocity_[name];
        if (v.size() != grad.size()) v = Matrix(grad.rows(), grad.cols());
        for (std::size_t i = 0; i < param.size(); ++i) {
            v[i] = 0.9 * v[i] + grad[i];
            param[i] -= lr_ * v[i];
        }
    }

private:
    Optimizer kind_;
    double lr_;
    std::map<std::string, Matrix> velocity_;
};

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    SplitMix64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

struct BatchBuffers {
    std::vector<Matrix> x; // per modality (B, d_m)
    Matrix y;              // (B, 1)
};

void gather_batch(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
                  std::size_t count, BatchBuffers& buf) {
    buf.x.assign(ds.n_modalities(), Matrix());
    for (std::size_t m = 0; m < ds.n_modalities(); ++m)
        buf.x[m] = Matrix(count, ds.spec.dims[m]);
    buf.y = Matrix(count, 1);
    for (std::size_t r = 0; r < count; ++r) {
        std::size_t i = idx[begin + r];
        buf.y(r, 0) = static_cast<double>(ds.labels[i]);
        for (std::size_t m = 0; m < ds.n_modalities(); ++m)
            for (std::size_t c = 0; c < ds.spec.dims[m]; ++c)
                buf.x[m](r, c) = ds.modalities[m](i, c);
    }
}

// Replace batch rows by adversarial examples from the current parameters.
void adversarialize_batch(const MultiModalModel& model, const Dataset& ds,
                          const std::vector<std::size_t>& idx, std::size_t begin,
                          std::size_t count, const AttackSpec& at, BatchBuffers& buf) {
    for (std::size_t r = 0; r < count; ++r) {
        std::size_t i = idx[begin + r];
        AttackResult res = run_attack(model, ds.sample(i), ds.labels[i], at);
        for (std::size_t m = 0; m < ds.n_modalities(); ++m)
            for (std::size_t c = 0; c < ds.spec.dims[m]; ++c)
                buf.x[m](r, c) = res.x[m](0, c);
    }
}

void append_record(TrainTrace& trace, double ce, double l1, double l2,
                   const MultiModalModel& model, const Dataset& ds,
                   const LipschitzInfo& lip) {
    auto [radius, acc] = mean_radius_and_accuracy(model, ds, lip);
    EpochRecord rec;
    rec.epoch = static_cast<int>(trace.epochs.size());
    rec.ce = ce;
    rec.l1 = l1;
    rec.l2 = l2;
    rec.mean_radius = radius;
    rec.clean_acc = acc;
    rec.orth_residual = max_orthonormality_residual(model);
    trace.epochs.push_back(rec);
}

// Shared epoch loop for the cross-entropy strategies (standard head) and the
// margin step (orthogonal head, rho-weighted penalty, projections, optional
// inner attack).
void gradient_training(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                       TrainTrace& trace, bool margin_step, const AttackSpec* at) {
    cfg.validate();
    if (margin_step && !model.is_orthogonal())
        throw UsageError("train: margin step requires the orthogonal head");
    if (!margin_step && model.is_orthogonal())
        throw UsageError("train: joint training baseline requires the standard head");

    auto params = collect_params(model, true);
    SgdUpdater updater(cfg.optimizer, cfg.lr_step1);
    std::map<std::size_t, LossTape> tapes; // keyed by batch size

    const std::size_t n = ds.size();
    BatchBuffers buf;
    for (int epoch = 0; epoch < cfg.epochs_step1; ++epoch) {
        auto idx = shuffled_indices(
            n, derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(trace.epochs.size())));
        double ce_sum = 0.0, l1_sum = 0.0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            std::size_t count = std::min(cfg.batch_size, n - begin);
            gather_batch(ds, idx, begin, count, buf);
            if (at) adversarialize_batch(model, ds, idx, begin, count, *at, buf);

            auto it = tapes.find(count);
            if (it == tapes.end()) {
                LossTape lt = margin_step ? build_step1_tape(model, count, cfg.rho)
                                          : build_ce_tape(model, count);
                it = tapes.emplace(count, std::move(lt)).first;
            }
            LossTape& lt = it->second;

            Bindings b;
            for (const auto& [name, mat] : params) b.set(name, *mat);
            for (std::size_t m = 0; m < buf.x.size(); ++m) b.set(x_name(m), buf.x[m]);
            b.set("y", buf.y);

            double loss;
            try {
                loss = lt.tape.forward_scalar(b);
            } catch (const OverflowError& e) {
                throw DivergenceError(std::string("training diverged: ") + e.what());
            }
            if (!std::isfinite(loss)) throw DivergenceError("training diverged: loss is not finite");
            lt.tape.backward();

            double w = static_cast<double>(count);
            ce_sum += lt.tape.value(lt.ce_node)(0, 0) * w;
            if (margin_step) l1_sum += lt.tape.value(lt.l1_node)(0, 0) * w;

            for (const auto& [name, mat] : params) updater.apply(name, *mat, lt.tape.grad(name));

            if (margin_step) {
                auto& head = model.orthogonal_head();
                for (auto& wrows : head.w_rows) wrows = orthonormalize(wrows);
                for (auto& a : head.a)
                    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::max(0.0, a[i]);
            }
        }
        LipschitzInfo lip = lipschitz_upper_all(model);
        append_record(trace, ce_sum / static_cast<double>(n),
                      margin_step ? l1_sum / static_cast<double>(n) : 0.0, 0.0, model, ds, lip);
    }
}

// Frozen-representation view used by the integration step: raw per-modality
// scores for the whole training set.
struct FrozenScores {
    std::vector<Matrix> scores; // per modality (n, K)
    Matrix bias;                // (1, K)
};

FrozenScores freeze_scores(const MultiModalModel& model, const Dataset& ds) {
    FrozenScores out;
    const auto& head = model.orthogonal_head();
    std::vector<Matrix> xs = ds.modalities;
    ForwardResult fwd = forward_orth(model, xs);
    out.scores = std::move(fwd.scores);
    out.bias = head.bias;
    return out;
}

struct Step2Metrics {
    double mean_radius = 0.0;
    double accuracy = 0.0;
    double ce = 0.0;
};

// Bound arithmetic on frozen scores under the current integration weights.
double frozen_pair_bound(const FrozenScores& fs, const std::vector<Matrix>& a,
                         const std::vector<Matrix>& tau_class, std::size_t i, std::size_t y,
                         std::size_t j, double* numerator = nullptr) {
    double num = fs.bias(0, y) - fs.bias(0, j);
    double den_sq = 0.0;
    for (std::size_t m = 0; m < fs.scores.size(); ++m) {
        num += a[m](y, 0) * fs.scores[m](i, y) - a[m](j, 0) * fs.scores[m](i, j);
        double t = a[m](y, 0) * tau_class[m](y, 0) + a[m](j, 0) * tau_class[m](j, 0);
        den_sq += t * t;
    }
    if (numerator) *numerator = num;
    double den = std::sqrt(den_sq);
    if (den > 0.0) return num / den;
    return num >= 0.0 ? std::numeric_limits<double>::infinity()
                      : -std::numeric_limits<double>::infinity();
}

std::pair<double, int> frozen_signed_bound(const FrozenScores& fs, const std::vector<Matrix>& a,
                                           const std::vector<Matrix>& tau_class, std::size_t i,
                                           int y, int k_classes) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = -1;
    for (int j = 0; j < k_classes; ++j) {
        if (j == y) continue;
        double b = frozen_pair_bound(fs, a, tau_class, i, static_cast<std::size_t>(y),
                                     static_cast<std::size_t>(j));
        if (best_j < 0 || b < best) {
            best = b;
            best_j = j;
        }
    }
    return {best, best_j};
}

int frozen_predict(const FrozenScores& fs, const std::vector<Matrix>& a, std::size_t i,
                   int k_classes) {
    int best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k_classes; ++c) {
        double v = fs.bias(0, static_cast<std::size_t>(c));
        for (std::size_t m = 0; m < fs.scores.size(); ++m)
            v += a[m](static_cast<std::size_t>(c), 0) * fs.scores[m](i, static_cast<std::size_t>(c));
        if (v > best_v) {
            best_v = v;
            best = c;
        }
    }
    return best;
}

Step2Metrics frozen_metrics(const FrozenScores& fs, const std::vector<Matrix>& a,
                            const std::vector<Matrix>& tau_class, const std::vector<int>& labels,
                            int k_classes) {
    Step2Metrics out;
    std::size_t n = labels.size();
    std::size_t valid = 0;
    Matrix logits(n, static_cast<std::size_t>(k_classes));
    for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < k_classes; ++c) {
            double v = fs.bias(0, static_cast<std::size_t>(c));
            for (std::size_t m = 0; m < fs.scores.size(); ++m)
                v += a[m](static_cast<std::size_t>(c), 0) *
                     fs.scores[m](i, static_cast<std::size_t>(c));
            logits(i, static_cast<std::size_t>(c)) = v;
        }
        if (frozen_predict(fs, a, i, k_classes) == labels[i]) {
            ++valid;
            auto [bound, j] = frozen_signed_bound(fs, a, tau_class, i, labels[i], k_classes);
            out.mean_radius += std::max(0.0, bound);
        }
    }
    out.mean_radius = valid ? out.mean_radius / static_cast<double>(valid) : 0.0;
    out.accuracy = static_cast<double>(valid) / static_cast<double>(n);
    out.ce = loss_ce(logits, labels);
    return out;
}

} // namespace

std::pair<double, double> mean_radius_and_accuracy(const MultiModalModel& model,
                                                   const Dataset& ds,
                                                   const LipschitzInfo& lip) {
    double radius_sum = 0.0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CertificateReport rep = certify(model, ds.sample(i), ds.labels[i], lip);
        if (rep.valid) {
            ++valid;
            radius_sum += rep.radius_mm;
        }
    }
    double radius = valid ? radius_sum / static_cast<double>(valid) : 0.0;
    double acc = static_cast<double>(valid) / static_cast<double>(ds.size());
    return {radius, acc};
}

void train_jt(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
              TrainTrace& trace) {
    gradient_training(model, ds, cfg, trace, false, nullptr);
}

void train_ojt(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
               TrainTrace& trace) {
    TrainConfig ce_only = cfg;
    ce_only.rho = 0.0;
    gradient_training(model, ds, ce_only, trace, true, nullptr);
}

void train_step1(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                 TrainTrace& trace) {
    gradient_training(model, ds, cfg, trace, true, nullptr);
}

void train_step2(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                 const LipschitzInfo& lip, TrainTrace& trace) {
    cfg.validate();
    auto& head = model.orthogonal_head();
    const int k = model.k;
    const std::size_t n = ds.size();
    const std::size_t n_mod = model.modalities();

    FrozenScores fs = freeze_scores(model, ds);
    double l1_frozen = loss_l1(fs.scores, ds.labels);
    double initial_radius =
        frozen_metrics(fs, head.a, lip.tau_class, ds.labels, k).mean_radius;

    SgdUpdater updater(cfg.optimizer, cfg.lr_step2);
    for (int epoch = 0; epoch < cfg.epochs_step2; ++epoch) {
        auto idx = shuffled_indices(
            n, derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(trace.epochs.size())));
        double l2_sum = 0.0;
        std::size_t l2_count = 0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            std::size_t count = std::min(cfg.batch_size, n - begin);

            std::vector<Step2Sample> batch;
            batch.reserve(count);
            for (std::size_t r = 0; r < count; ++r) {
                std::size_t i = idx[begin + r];
                int y = ds.labels[i];
                if (cfg.step2_valid_only && frozen_predict(fs, head.a, i, k) != y) continue;
                auto [bound, j] = frozen_signed_bound(fs, head.a, lip.tau_class, i, y, k);
                Step2Sample s;
                s.y = y;
                s.j = j;
                s.scores = Matrix(n_mod, static_cast<std::size_t>(k));
                for (std::size_t m = 0; m < n_mod; ++m)
                    for (int c = 0; c < k; ++c)
                        s.scores(m, static_cast<std::size_t>(c)) =
                            fs.scores[m](i, static_cast<std::size_t>(c));
                batch.push_back(std::move(s));
            }
            if (batch.empty()) continue;

            LossTape lt = build_step2_tape(batch, lip.tau_class, fs.bias);
            Bindings b;
            for (std::size_t m = 0; m < n_mod; ++m) b.set(a_name(m), head.a[m]);
            double loss;
            try {
                loss = lt.tape.forward_scalar(b);
            } catch (const OverflowError& e) {
                throw DivergenceError(std::string("integration step diverged: ") + e.what());
            }
            if (!std::isfinite(loss))
                throw DivergenceError("integration step diverged: loss is not finite");
            lt.tape.backward();
            for (std::size_t m = 0; m < n_mod; ++m)
                updater.apply(a_name(m), head.a[m], lt.tape.grad(a_name(m)));

            // projection: nonnegative weights, and no class may lose every
            // modality (that would zero a certificate denominator)
            for (auto& a : head.a)
                for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::max(0.0, a[i]);
            for (int c = 0; c < k; ++c) {
                double total = 0.0;
                for (std::size_t m = 0; m < n_mod; ++m) total += head.a[m](static_cast<std::size_t>(c), 0);
                if (total == 0.0) {
                    for (std::size_t m = 0; m < n_mod; ++m)
                        head.a[m](static_cast<std::size_t>(c), 0) = 1e-3;
                    trace.notes.push_back("step2: class " + std::to_string(c) +
                                          " integration weights hit zero; reset to 1e-3");
                }
            }
            l2_sum += loss * static_cast<double>(batch.size());
            l2_count += batch.size();
        }
        Step2Metrics metrics = frozen_metrics(fs, head.a, lip.tau_class, ds.labels, k);
        EpochRecord rec;
        rec.epoch = static_cast<int>(trace.epochs.size());
        rec.ce = metrics.ce;
        rec.l1 = l1_frozen;
        rec.l2 = l2_count ? l2_sum / static_cast<double>(l2_count) : 0.0;
        rec.mean_radius = metrics.mean_radius;
        rec.clean_acc = metrics.accuracy;
        rec.orth_residual = max_orthonormality_residual(model);
        trace.epochs.push_back(rec);
    }

    double final_radius = frozen_metrics(fs, head.a, lip.tau_class, ds.labels, k).mean_radius;
    if (final_radius < initial_radius - 1e-9)
        throw IntegrityError("integration step decreased the mean certified radius (" +
                             std::to_string(initial_radius) + " -> " +
                             std::to_string(final_radius) + ")");
}

void train_crmt(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                TrainTrace& trace) {
    cfg.validate();
    for (int it = 0; it < cfg.iterations; ++it) {
        train_step1(model, ds, cfg, trace);
        LipschitzInfo lip = lipschitz_upper_all(model);
        train_step2(model, ds, cfg, lip, trace);
    }
}

void train_crmt_at(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                   TrainTrace& trace) {
    cfg.validate();
    if (!cfg.at_spec)
        throw ConfigError("train: adversarial variant needs an inner attack spec");
    for (int it = 0; it < cfg.iterations; ++it) {
        gradient_training(model, ds, cfg, trace, true, &*cfg.at_spec);
        LipschitzInfo lip = lipschitz_upper_all(model);
        train_step2(model, ds, cfg, lip, trace);
    }
}

void train_strategy(const std::string& strategy, MultiModalModel& model, const Dataset& ds,
                    const TrainConfig& cfg, TrainTrace& trace) {
    if (strategy == "jt") return train_jt(model, ds, cfg, trace);
    if (strategy == "ojt") return train_ojt(model, ds, cfg, trace);
    if (strategy == "crmt") return train_crmt(model, ds, cfg, trace);
    if (strategy == "crmt-at") return train_crmt_at(model, ds, cfg, trace);
    throw ConfigError("unknown training strategy '" + strategy + "'");
}

} // namespace crmt
