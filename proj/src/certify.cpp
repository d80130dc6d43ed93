#include "crmt/certify.hpp"

#include "crmt/errors.hpp"
#include "crmt/prng.hpp"
#include "crmt/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace crmt {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDegenerateRowNorm = 1e-12;
constexpr double kNumeratorIdentityTol = 1e-10;
} // namespace

void LipschitzInfo::scale_by(double factor) {
    for (double& v : encoder_lip) v *= factor;
    for (Matrix& m : tau_pairs) m *= factor;
    for (Matrix& m : tau_class) m *= factor;
}

double lipschitz_upper(const Encoder& enc, double direction_norm) {
    double lip = direction_norm;
    for (const auto& layer : enc.layers) lip *= spectral_norm(layer.weight);
    return lip;
}

LipschitzInfo lipschitz_upper_all(const MultiModalModel& model) {
    LipschitzInfo info;
    const std::size_t k = static_cast<std::size_t>(model.k);
    for (std::size_t m = 0; m < model.modalities(); ++m) {
        double lip = lipschitz_upper(model.encoders[m], 1.0);
        info.encoder_lip.push_back(lip);
        // Margin directions are unit vectors and orthonormal class rows have
        // unit norm, so every pair/class shares the encoder value. Stored per
        // pair / per class anyway to keep the data model general.
        info.tau_pairs.push_back(Matrix(k, k, lip));
        info.tau_class.push_back(Matrix(k, 1, lip));
    }
    return info;
}

double lipschitz_sampled_lower(const Encoder& enc, const Matrix& direction,
                               const DomainBox& box, std::size_t n_pairs,
                               std::uint64_t seed) {
    if (n_pairs < 1) throw UsageError("lipschitz_sampled_lower: need at least one pair");
    if (direction.size() != enc.output_dim())
        throw ShapeError("lipschitz_sampled_lower: direction does not match encoder output");

    const std::size_t d = enc.input_dim();
    Matrix dir_row(1, direction.size());
    for (std::size_t i = 0; i < direction.size(); ++i) dir_row[i] = direction[i];

    auto f = [&](const Matrix& x) { return dot(dir_row, encode(enc, x)); };

    // Gradient tape used to aim the local pairs along the steepest direction,
    // which makes the estimate tight for linear maps.
    Tape tape;
    NodeId h = tape.var("x", 1, d);
    for (const auto& layer : enc.layers) {
        h = tape.add(tape.matmul(h, tape.constant(layer.weight)), tape.constant(layer.bias));
        switch (layer.act) {
            case Activation::Relu: h = tape.relu(h); break;
            case Activation::Tanh: h = tape.tanh(h); break;
            case Activation::Identity: break;
        }
    }
    tape.set_output(tape.dot(h, tape.constant(dir_row)));

    SplitMix64 rng(derive_seed(seed, "lip-sample"));
    double best = 0.0;
    const double local_step = 1e-4 * std::max(1.0, box.hi - box.lo);
    for (std::size_t p = 0; p < n_pairs; ++p) {
        Matrix x(1, d);
        for (std::size_t i = 0; i < d; ++i) x[i] = rng.uniform(box.lo, box.hi);
        Matrix x2(1, d);
        if (p % 2 == 0) {
            for (std::size_t i = 0; i < d; ++i) x2[i] = rng.uniform(box.lo, box.hi);
        } else {
            Bindings b;
            b.set("x", x);
            tape.forward(b);
            tape.backward();
            Matrix g = tape.grad("x");
            double gn = g.norm_l2();
            if (gn == 0.0) continue;
            x2 = x + g * (local_step / gn);
        }
        Matrix diff = x2 - x;
        double dist = diff.norm_l2();
        if (dist == 0.0) continue; // zero-distance pair skipped
        best = std::max(best, std::fabs(f(x2) - f(x)) / dist);
    }
    return best;
}

double margin(const MultiModalModel& model, const std::vector<Matrix>& xs,
              std::size_t modality, int y, int k) {
    const auto& head = model.standard_head();
    if (y == k) throw UsageError("margin: class pair needs two distinct classes");
    const Matrix& w = head.w_parts.at(modality);
    Matrix diff = w.row(static_cast<std::size_t>(y)) - w.row(static_cast<std::size_t>(k));
    double norm = diff.norm_l2();
    if (norm < kDegenerateRowNorm)
        throw DegenerateError("margin: classifier rows " + std::to_string(y) + " and " +
                              std::to_string(k) + " coincide for modality " +
                              std::to_string(modality + 1));
    Matrix phi = encode(model.encoders.at(modality), xs.at(modality));
    return dot(diff, phi) / norm;
}

PairFactors integration_factors(const StandardHead& head, int y, int j) {
    if (y == j) throw UsageError("integration_factors: class pair needs two distinct classes");
    PairFactors out;
    for (const auto& w : head.w_parts) {
        Matrix diff = w.row(static_cast<std::size_t>(y)) - w.row(static_cast<std::size_t>(j));
        out.c.push_back(diff.norm_l2());
    }
    out.beta =
        head.bias(0, static_cast<std::size_t>(y)) - head.bias(0, static_cast<std::size_t>(j));
    return out;
}

OrthPairFactors integration_factors(const OrthogonalHead& head, int y, int j) {
    if (y == j) throw UsageError("integration_factors: class pair needs two distinct classes");
    OrthPairFactors out;
    for (const auto& a : head.a) {
        out.a_y.push_back(a(static_cast<std::size_t>(y), 0));
        out.a_j.push_back(a(static_cast<std::size_t>(j), 0));
    }
    out.beta =
        head.bias(0, static_cast<std::size_t>(y)) - head.bias(0, static_cast<std::size_t>(j));
    return out;
}

namespace {

int argmax_logits(const Matrix& logits) {
    int best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
        if (logits(0, c) > logits(0, best)) best = static_cast<int>(c);
    return best;
}

struct PairTerms {
    double numerator = 0.0;
    double den_mm = 0.0;            // sqrt of sum of squared per-modality terms
    std::vector<double> den_uni;    // per modality
};

// Min-over-j assembly shared by both certificate kinds. Pairs whose
// denominator vanishes cannot be reached by perturbing the inputs and bound
// at infinity; if every pair vanishes the model is degenerate.
CertificateReport assemble_report(int k, int y, int predicted, std::size_t n_mod,
                                  const std::vector<PairTerms>& terms, Matrix margins) {
    CertificateReport rep;
    rep.label = y;
    rep.predicted = predicted;
    rep.valid = predicted == y;
    rep.margins = std::move(margins);
    rep.radius_uni.assign(n_mod, kInf);

    double best_signed = kInf;
    int best_j = -1;
    bool any_reachable = false;
    for (int j = 0; j < k; ++j) {
        if (j == y) continue;
        const PairTerms& t = terms[static_cast<std::size_t>(j)];
        double bound;
        if (t.den_mm > 0.0) {
            any_reachable = true;
            bound = t.numerator / t.den_mm;
        } else {
            bound = t.numerator >= 0.0 ? kInf : -kInf;
        }
        if (best_j < 0 || bound < best_signed) { // ties keep the first index
            best_signed = bound;
            best_j = j;
        }
        for (std::size_t m = 0; m < n_mod; ++m) {
            double uni = t.den_uni[m] > 0.0 ? t.numerator / t.den_uni[m]
                                            : (t.numerator >= 0.0 ? kInf : -kInf);
            rep.radius_uni[m] = std::min(rep.radius_uni[m], uni);
        }
    }
    if (!any_reachable)
        throw DegenerateError(
            "certify: every class pair has a zero denominator (all integration"
            " factor x Lipschitz products vanish)");

    rep.signed_radius = best_signed;
    rep.binding_class = best_j;
    if (rep.valid) {
        rep.radius_mm = std::max(0.0, best_signed);
        for (double& r : rep.radius_uni) r = std::max(0.0, r);
    } else {
        rep.radius_mm = 0.0;
        for (double& r : rep.radius_uni) r = 0.0;
    }
    return rep;
}

} // namespace

CertificateReport certify_nmodal(const MultiModalModel& model, const std::vector<Matrix>& xs,
                                 int y, const LipschitzInfo& lip) {
    const auto& head = model.standard_head();
    const std::size_t n_mod = model.modalities();
    const int k = model.k;
    if (y < 0 || y >= k) throw UsageError("certify: label out of range");

    ForwardResult fwd = forward(model, xs);
    int predicted = argmax_logits(fwd.logits);

    Matrix margins(static_cast<std::size_t>(k), n_mod);
    std::vector<PairTerms> terms(static_cast<std::size_t>(k));
    std::vector<std::vector<double>> eta_per_pair(static_cast<std::size_t>(k));

    for (int j = 0; j < k; ++j) {
        if (j == y) continue;
        PairFactors f = integration_factors(head, y, j);
        PairTerms t;
        t.numerator = f.beta;
        double den_sq = 0.0;
        t.den_uni.assign(n_mod, 0.0);
        std::vector<double> eta(n_mod, 0.0);
        for (std::size_t m = 0; m < n_mod; ++m) {
            double zeta = 0.0;
            if (f.c[m] >= kDegenerateRowNorm) {
                Matrix diff = head.w_parts[m].row(static_cast<std::size_t>(y)) -
                              head.w_parts[m].row(static_cast<std::size_t>(j));
                zeta = dot(diff, fwd.embeddings[m]) / f.c[m];
            }
            margins(static_cast<std::size_t>(j), m) = zeta;
            t.numerator += f.c[m] * zeta;
            double tau = lip.tau_pairs[m](static_cast<std::size_t>(y), static_cast<std::size_t>(j));
            double e = f.c[m] * tau;
            eta[m] = e;
            den_sq += e * e;
            t.den_uni[m] = e;
        }
        t.den_mm = std::sqrt(den_sq);
        double direct = fwd.logits(0, static_cast<std::size_t>(y)) -
                        fwd.logits(0, static_cast<std::size_t>(j));
        if (std::fabs(t.numerator - direct) >
            kNumeratorIdentityTol * std::max(1.0, std::fabs(direct)))
            throw IntegrityError("certify: margin decomposition does not reproduce the"
                                 " logit gap for class " + std::to_string(j));
        terms[static_cast<std::size_t>(j)] = std::move(t);
        eta_per_pair[static_cast<std::size_t>(j)] = std::move(eta);
    }

    CertificateReport rep =
        assemble_report(k, y, predicted, n_mod, terms, std::move(margins));
    rep.eta = eta_per_pair[static_cast<std::size_t>(rep.binding_class)];
    return rep;
}

CertificateReport certify_standard(const MultiModalModel& model, const std::vector<Matrix>& xs,
                                   int y, const LipschitzInfo& lip) {
    return certify_nmodal(model, xs, y, lip);
}

CertificateReport certify_orth(const MultiModalModel& model, const std::vector<Matrix>& xs,
                               int y, const LipschitzInfo& lip) {
    const auto& head = model.orthogonal_head();
    const std::size_t n_mod = model.modalities();
    const int k = model.k;
    if (y < 0 || y >= k) throw UsageError("certify: label out of range");

    ForwardResult fwd = forward_orth(model, xs);
    int predicted = argmax_logits(fwd.logits);

    Matrix gaps(static_cast<std::size_t>(k), n_mod); // per-modality weighted score gaps
    std::vector<PairTerms> terms(static_cast<std::size_t>(k));
    std::vector<std::vector<double>> eta_per_pair(static_cast<std::size_t>(k));

    for (int j = 0; j < k; ++j) {
        if (j == y) continue;
        OrthPairFactors f = integration_factors(head, y, j);
        PairTerms t;
        t.numerator = f.beta;
        double den_sq = 0.0;
        t.den_uni.assign(n_mod, 0.0);
        std::vector<double> eta(n_mod, 0.0);
        for (std::size_t m = 0; m < n_mod; ++m) {
            double s_y = fwd.scores[m](0, static_cast<std::size_t>(y));
            double s_j = fwd.scores[m](0, static_cast<std::size_t>(j));
            double gap = f.a_y[m] * s_y - f.a_j[m] * s_j;
            gaps(static_cast<std::size_t>(j), m) = gap;
            t.numerator += gap;
            double e = f.a_y[m] * lip.tau_class[m](static_cast<std::size_t>(y), 0) +
                       f.a_j[m] * lip.tau_class[m](static_cast<std::size_t>(j), 0);
            eta[m] = e;
            den_sq += e * e;
            t.den_uni[m] = e;
        }
        t.den_mm = std::sqrt(den_sq);
        double direct = fwd.logits(0, static_cast<std::size_t>(y)) -
                        fwd.logits(0, static_cast<std::size_t>(j));
        if (std::fabs(t.numerator - direct) >
            kNumeratorIdentityTol * std::max(1.0, std::fabs(direct)))
            throw IntegrityError("certify: score decomposition does not reproduce the"
                                 " logit gap for class " + std::to_string(j));
        terms[static_cast<std::size_t>(j)] = std::move(t);
        eta_per_pair[static_cast<std::size_t>(j)] = std::move(eta);
    }

    CertificateReport rep = assemble_report(k, y, predicted, n_mod, terms, std::move(gaps));
    rep.eta = eta_per_pair[static_cast<std::size_t>(rep.binding_class)];
    return rep;
}

CertificateReport certify(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                          const LipschitzInfo& lip) {
    return model.is_orthogonal() ? certify_orth(model, xs, y, lip)
                                 : certify_nmodal(model, xs, y, lip);
}

std::pair<double, int> signed_bound_orth(const MultiModalModel& model,
                                         const std::vector<Matrix>& xs, int y,
                                         const LipschitzInfo& lip) {
    CertificateReport rep = certify_orth(model, xs, y, lip);
    return {rep.signed_radius, rep.binding_class};
}

EtaReport vulnerability_indicators(const MultiModalModel& model, const LipschitzInfo& lip) {
    const std::size_t k = static_cast<std::size_t>(model.k);
    const std::size_t n_mod = model.modalities();
    EtaReport out;
    for (std::size_t m = 0; m < n_mod; ++m) out.eta.emplace_back(k, k);
    out.ratio = Matrix(k, k, 1.0); // diagonal fixed at 1 by convention

    for (std::size_t y = 0; y < k; ++y) {
        for (std::size_t j = 0; j < k; ++j) {
            if (y == j) continue;
            if (model.is_orthogonal()) {
                const auto& head = model.orthogonal_head();
                for (std::size_t m = 0; m < n_mod; ++m)
                    out.eta[m](y, j) = head.a[m](y, 0) * lip.tau_class[m](y, 0) +
                                       head.a[m](j, 0) * lip.tau_class[m](j, 0);
            } else {
                const auto& head = model.standard_head();
                PairFactors f = integration_factors(head, static_cast<int>(y), static_cast<int>(j));
                for (std::size_t m = 0; m < n_mod; ++m)
                    out.eta[m](y, j) = f.c[m] * lip.tau_pairs[m](y, j);
            }
            double num = out.eta[0](y, j);
            double den = out.eta[1](y, j);
            out.ratio(y, j) = den > 0.0 ? num / den : kInf;
        }
    }
    return out;
}

double eta_ratio_geomean_deviation(const Matrix& ratio) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 0; y < ratio.rows(); ++y)
        for (std::size_t j = 0; j < ratio.cols(); ++j) {
            if (y == j) continue;
            double r = ratio(y, j);
            if (!(r > 0.0) || std::isinf(r)) return kInf;
            acc += std::fabs(std::log(r));
            ++count;
        }
    return count == 0 ? 1.0 : std::exp(acc / static_cast<double>(count));
}

} // namespace crmt
