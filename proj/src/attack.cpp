#include "crmt/attack.hpp"

#include "crmt/errors.hpp"
#include "crmt/prng.hpp"
#include "crmt/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace crmt {

std::string attack_family_name(AttackFamily f) {
    switch (f) {
        case AttackFamily::Fgm: return "fgm";
        case AttackFamily::PgdL2: return "pgd_l2";
        case AttackFamily::GaussianNoise: return "gaussian_noise";
        case AttackFamily::FeatureMask: return "feature_mask";
        case AttackFamily::Missing: return "missing";
    }
    return "?";
}

AttackFamily attack_family_from_name(const std::string& name) {
    if (name == "fgm") return AttackFamily::Fgm;
    if (name == "pgd_l2") return AttackFamily::PgdL2;
    if (name == "gaussian_noise") return AttackFamily::GaussianNoise;
    if (name == "feature_mask") return AttackFamily::FeatureMask;
    if (name == "missing") return AttackFamily::Missing;
    throw ConfigError("unknown attack family '" + name + "'");
}

std::vector<std::size_t> AttackSpec::resolved_targets(std::size_t n_modalities) const {
    std::vector<std::size_t> out = targets;
    if (out.empty()) {
        out.resize(n_modalities);
        std::iota(out.begin(), out.end(), 0);
    }
    for (std::size_t t : out)
        if (t >= n_modalities)
            throw UsageError("attack: target modality " + std::to_string(t + 1) +
                             " does not exist");
    return out;
}

namespace {

// Cross-entropy tape with the inputs as variables and the model parameters
// baked in as constants; reused across PGD steps.
class InputGradientTape {
public:
    InputGradientTape(const MultiModalModel& model, const std::vector<std::size_t>& dims) {
        const std::size_t k = static_cast<std::size_t>(model.k);
        std::vector<NodeId> phis;
        for (std::size_t m = 0; m < model.modalities(); ++m) {
            NodeId h = tape_.var(x_name(m), 1, dims[m]);
            for (const auto& layer : model.encoders[m].layers) {
                h = tape_.add(tape_.matmul(h, tape_.constant(layer.weight)),
                              tape_.constant(layer.bias));
                switch (layer.act) {
                    case Activation::Relu: h = tape_.relu(h); break;
                    case Activation::Tanh: h = tape_.tanh(h); break;
                    case Activation::Identity: break;
                }
            }
            phis.push_back(h);
        }
        NodeId label = tape_.input("y", 1, 1);
        NodeId logits = -1;
        if (model.is_orthogonal()) {
            const auto& head = model.orthogonal_head();
            for (std::size_t m = 0; m < phis.size(); ++m) {
                NodeId s = tape_.matmul(phis[m], tape_.constant(head.w_rows[m].transposed()));
                NodeId weighted = tape_.colscale(s, tape_.constant(head.a[m]));
                logits = logits < 0 ? weighted : tape_.add(logits, weighted);
            }
            logits = tape_.add(logits, tape_.constant(head.bias));
        } else {
            const auto& head = model.standard_head();
            for (std::size_t m = 0; m < phis.size(); ++m) {
                NodeId part = tape_.matmul(phis[m], tape_.constant(head.w_parts[m].transposed()));
                logits = logits < 0 ? part : tape_.add(logits, part);
            }
            logits = tape_.add(logits, tape_.constant(head.bias));
        }
        tape_.set_output(tape_.softmax_cross_entropy(logits, label));
        (void)k;
    }

    // Loss and input gradients at xs for true label y.
    double eval(const std::vector<Matrix>& xs, int y, std::vector<Matrix>& grads) {
        Matrix label(1, 1, static_cast<double>(y));
        Bindings b;
        for (std::size_t m = 0; m < xs.size(); ++m) b.set(x_name(m), xs[m]);
        b.set("y", label);
        double loss = tape_.forward_scalar(b);
        tape_.backward();
        grads.clear();
        for (std::size_t m = 0; m < xs.size(); ++m) grads.push_back(tape_.grad(x_name(m)));
        return loss;
    }

private:
    static std::string x_name(std::size_t m) { return "x" + std::to_string(m + 1); }
    Tape tape_;
};

double joint_norm(const std::vector<Matrix>& deltas, const std::vector<std::size_t>& targets) {
    double s = 0.0;
    for (std::size_t t : targets)
        for (std::size_t i = 0; i < deltas[t].size(); ++i) s += deltas[t][i] * deltas[t][i];
    return std::sqrt(s);
}

AttackResult finish(const MultiModalModel& model, const std::vector<Matrix>& base,
                    std::vector<Matrix> perturbed, int y) {
    AttackResult res;
    res.norms.resize(base.size());
    double total_sq = 0.0;
    for (std::size_t m = 0; m < base.size(); ++m) {
        Matrix diff = perturbed[m] - base[m];
        res.norms[m] = diff.norm_l2();
        total_sq += res.norms[m] * res.norms[m];
    }
    res.total_norm = std::sqrt(total_sq);
    res.success = predict(model, perturbed) != y;
    res.x = std::move(perturbed);
    return res;
}

struct PgdOptions {
    int steps = 20;
    double step_size = 0.0;
    bool random_init = false;
    std::uint64_t init_seed = 0;
    bool stop_on_success = false; // oracle mode: any adversarial iterate counts
};

AttackResult pgd_core(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                      double epsilon, const std::vector<std::size_t>& targets,
                      const PgdOptions& opt) {
    if (epsilon == 0.0) return finish(model, xs, xs, y);

    InputGradientTape tape(model, [&] {
        std::vector<std::size_t> dims;
        for (const auto& x : xs) dims.push_back(x.cols());
        return dims;
    }());

    double step = opt.step_size > 0.0 ? opt.step_size
                                      : 2.5 * epsilon / static_cast<double>(opt.steps);

    std::vector<Matrix> delta;
    for (const auto& x : xs) delta.emplace_back(x.rows(), x.cols());
    if (opt.random_init) {
        SplitMix64 rng(opt.init_seed);
        for (std::size_t t : targets)
            for (std::size_t i = 0; i < delta[t].size(); ++i) delta[t][i] = rng.gaussian();
        double n = joint_norm(delta, targets);
        if (n > 0.0) {
            double r = epsilon * rng.uniform01() / n;
            for (std::size_t t : targets) delta[t] *= r;
        }
    }

    std::vector<Matrix> current(xs);
    auto apply_delta = [&] {
        for (std::size_t m = 0; m < xs.size(); ++m) current[m] = xs[m];
        for (std::size_t t : targets) current[t] += delta[t];
    };
    apply_delta();

    bool any_gradient = false;
    std::vector<Matrix> grads;
    for (int it = 0; it < opt.steps; ++it) {
        if (opt.stop_on_success && predict(model, current) != y) break;
        tape.eval(current, y, grads);
        // Restrict to the target modalities and normalize jointly.
        double gnorm_sq = 0.0;
        for (std::size_t t : targets)
            for (std::size_t i = 0; i < grads[t].size(); ++i)
                gnorm_sq += grads[t][i] * grads[t][i];
        double gnorm = std::sqrt(gnorm_sq);
        if (gnorm == 0.0) break;
        any_gradient = true;
        for (std::size_t t : targets) delta[t] += grads[t] * (step / gnorm);
        double dnorm = joint_norm(delta, targets);
        if (dnorm > epsilon) {
            double r = epsilon / dnorm;
            for (std::size_t t : targets) delta[t] *= r;
        }
        apply_delta();
    }

    AttackResult res = finish(model, xs, std::move(current), y);
    res.zero_gradient = !any_gradient && !opt.random_init;
    if (res.zero_gradient) {
        res.x = xs; // untouched sample
        res.success = predict(model, xs) != y;
        std::fill(res.norms.begin(), res.norms.end(), 0.0);
        res.total_norm = 0.0;
    }
    return res;
}

} // namespace

AttackResult fgm(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                 const AttackSpec& spec) {
    if (spec.epsilon < 0) throw UsageError("fgm: epsilon must be >= 0");
    auto targets = spec.resolved_targets(model.modalities());
    PgdOptions opt;
    opt.steps = 1;
    opt.step_size = spec.epsilon;
    return pgd_core(model, xs, y, spec.epsilon, targets, opt);
}

AttackResult pgd_l2(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                    const AttackSpec& spec) {
    if (spec.epsilon < 0) throw UsageError("pgd_l2: epsilon must be >= 0");
    if (spec.steps < 1) throw UsageError("pgd_l2: steps must be >= 1");
    auto targets = spec.resolved_targets(model.modalities());
    PgdOptions opt;
    opt.steps = spec.steps;
    opt.step_size = spec.step_size;
    return pgd_core(model, xs, y, spec.epsilon, targets, opt);
}

AttackResult missing_modality(const MultiModalModel& model, const std::vector<Matrix>& xs,
                              int y, const AttackSpec& spec) {
    auto targets = spec.resolved_targets(model.modalities());
    if (targets.size() != 1)
        throw UsageError("missing_modality: exactly one target modality");
    std::vector<Matrix> out(xs);
    out[targets[0]] = Matrix(xs[targets[0]].rows(), xs[targets[0]].cols());
    return finish(model, xs, std::move(out), y);
}

AttackResult gaussian_noise(const MultiModalModel& model, const std::vector<Matrix>& xs,
                            int y, const AttackSpec& spec) {
    if (spec.epsilon < 0) throw UsageError("gaussian_noise: sigma must be >= 0");
    auto targets = spec.resolved_targets(model.modalities());
    std::vector<Matrix> out(xs);
    if (spec.epsilon > 0.0) {
        SplitMix64 rng(derive_seed(spec.seed, "gaussian-noise"));
        for (std::size_t t : targets)
            for (std::size_t i = 0; i < out[t].size(); ++i)
                out[t][i] += spec.epsilon * rng.gaussian();
    }
    return finish(model, xs, std::move(out), y);
}

AttackResult feature_mask(const MultiModalModel& model, const std::vector<Matrix>& xs,
                          int y, const AttackSpec& spec) {
    if (spec.epsilon < 0.0 || spec.epsilon > 1.0)
        throw UsageError("feature_mask: fraction must be in [0, 1]");
    auto targets = spec.resolved_targets(model.modalities());
    std::vector<Matrix> out(xs);
    SplitMix64 rng(derive_seed(spec.seed, "feature-mask"));
    for (std::size_t t : targets) {
        std::size_t d = out[t].size();
        std::size_t n_mask = static_cast<std::size_t>(
            std::llround(spec.epsilon * static_cast<double>(d)));
        std::vector<std::size_t> idx(d);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = d; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        for (std::size_t i = 0; i < n_mask; ++i) out[t][idx[i]] = 0.0;
    }
    return finish(model, xs, std::move(out), y);
}

AttackResult run_attack(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                        const AttackSpec& spec) {
    switch (spec.family) {
        case AttackFamily::Fgm: return fgm(model, xs, y, spec);
        case AttackFamily::PgdL2: return pgd_l2(model, xs, y, spec);
        case AttackFamily::GaussianNoise: return gaussian_noise(model, xs, y, spec);
        case AttackFamily::FeatureMask: return feature_mask(model, xs, y, spec);
        case AttackFamily::Missing: return missing_modality(model, xs, y, spec);
    }
    throw UsageError("run_attack: unknown family");
}

namespace {

// Strengthened attack used inside the oracle search.
bool oracle_attack_succeeds(const MultiModalModel& model, const std::vector<Matrix>& xs,
                            int y, double epsilon, const std::vector<std::size_t>& targets,
                            std::uint64_t seed, std::uint64_t trial) {
    constexpr int kRestarts = 5;
    for (int r = 0; r < kRestarts; ++r) {
        PgdOptions opt;
        opt.steps = 100;
        opt.random_init = r > 0; // first restart starts at the clean sample
        opt.init_seed = derive_seed(seed, "oracle-restart",
                                    trial * static_cast<std::uint64_t>(kRestarts) +
                                        static_cast<std::uint64_t>(r));
        opt.stop_on_success = true;
        AttackResult res = pgd_core(model, xs, y, epsilon, targets, opt);
        if (res.success) return true;
    }
    return false;
}

} // namespace

double min_radius_oracle(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                         const std::vector<std::size_t>& targets, double tol,
                         std::uint64_t seed) {
    if (tol <= 0.0) throw UsageError("min_radius_oracle: tol must be positive");
    if (predict(model, xs) != y)
        throw UsageError("min_radius_oracle: sample is already misclassified");
    std::vector<std::size_t> tgt = targets;
    if (tgt.empty()) {
        tgt.resize(model.modalities());
        std::iota(tgt.begin(), tgt.end(), 0);
    }

    std::uint64_t trial = 0;
    double hi = std::max(tol, 1e-3);
    bool found = false;
    for (int doubling = 0; doubling < 40; ++doubling) {
        if (oracle_attack_succeeds(model, xs, y, hi, tgt, seed, trial++)) {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    if (!found) return std::numeric_limits<double>::infinity();

    double lo = 0.0;
    double best_success = hi;
    while (hi - lo > tol) {
        double mid = 0.5 * (lo + hi);
        if (oracle_attack_succeeds(model, xs, y, mid, tgt, seed, trial++)) {
            hi = mid;
            best_success = mid;
        } else {
            lo = mid;
        }
    }
    return best_success;
}

} // namespace crmt
