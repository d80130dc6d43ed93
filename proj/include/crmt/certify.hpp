#pragma once

#include "crmt/matrix.hpp"
#include "crmt/model.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace crmt {

// Lipschitz estimates for the per-modality margin / score maps. The spectral
// product over encoder layers is a guaranteed upper bound (activations are
// 1-Lipschitz and margin directions are unit vectors), so certificates built
// from it stay sound. The sampled variant is a lower estimate used only to
// sandwich-test the upper bound, never to certify.
struct LipschitzInfo {
    enum class Method { SpectralProduct, SampledLower };
    Method method = Method::SpectralProduct;
    std::vector<double> encoder_lip; // per modality

    // standard head, pair (y, j): tau_pairs[m](y, j)
    std::vector<Matrix> tau_pairs;
    // orthogonal head, class k: tau_class[m](k, 0)
    std::vector<Matrix> tau_class;

    void scale_by(double factor);
};

// Spectral-norm product for one encoder, times the norm of the output-side
// direction the scalar map projects onto.
double lipschitz_upper(const Encoder& enc, double direction_norm);

LipschitzInfo lipschitz_upper_all(const MultiModalModel& model);

struct DomainBox {
    double lo = -1.0;
    double hi = 1.0;
};

// Empirical lower estimate: max pair slope |f(x)-f(x')| / ||x-x'|| of the
// scalar map f = direction . phi(x). Half the pairs are box-wide, half step
// from a sampled point along the local gradient so linear maps are matched
// tightly. Deterministic per seed; zero-distance pairs are skipped.
double lipschitz_sampled_lower(const Encoder& enc, const Matrix& direction,
                               const DomainBox& box, std::size_t n_pairs,
                               std::uint64_t seed);

// Signed distance of modality m's representation from the (y, k) uni-modal
// decision boundary, normalized by the classifier row difference.
double margin(const MultiModalModel& model, const std::vector<Matrix>& xs,
              std::size_t modality, int y, int k);

struct PairFactors {
    std::vector<double> c; // per modality: ||W_y. - W_j.||
    double beta = 0.0;     // b_y - b_j
};
PairFactors integration_factors(const StandardHead& head, int y, int j);

struct OrthPairFactors {
    std::vector<double> a_y;
    std::vector<double> a_j;
    double beta = 0.0;
};
OrthPairFactors integration_factors(const OrthogonalHead& head, int y, int j);

struct CertificateReport {
    int id = -1;
    int label = -1;
    int predicted = -1;
    bool valid = false; // false when misclassified; radii forced to 0
    double radius_mm = 0.0;
    std::vector<double> radius_uni; // per modality
    int binding_class = -1;         // j attaining the multi-modal minimum
    std::vector<double> eta;        // per modality, at the binding pair
    double signed_radius = 0.0;     // min_j bound without clamping (trainer)
    Matrix margins;                 // (K, M): margin/score gap per (j, m); row y is 0
};

CertificateReport certify_standard(const MultiModalModel& model, const std::vector<Matrix>& xs,
                                   int y, const LipschitzInfo& lip);
CertificateReport certify_orth(const MultiModalModel& model, const std::vector<Matrix>& xs,
                               int y, const LipschitzInfo& lip);
// General form over l >= 2 modalities; certify_standard delegates here.
CertificateReport certify_nmodal(const MultiModalModel& model, const std::vector<Matrix>& xs,
                                 int y, const LipschitzInfo& lip);

// Dispatches on the head kind.
CertificateReport certify(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                          const LipschitzInfo& lip);

// Signed certified bound for one sample under the orthogonal head, together
// with the binding class; used by the integration-weight training step.
std::pair<double, int> signed_bound_orth(const MultiModalModel& model,
                                         const std::vector<Matrix>& xs, int y,
                                         const LipschitzInfo& lip);

// Vulnerability indicators per class pair: eta[m](y, j). ratio(y, j) =
// eta[0] / eta[1] with diagonal fixed at 1 (modality 1 is always the
// numerator by convention). Zero denominators become +inf entries.
struct EtaReport {
    std::vector<Matrix> eta; // per modality, (K, K)
    Matrix ratio;            // (K, K)
};
EtaReport vulnerability_indicators(const MultiModalModel& model, const LipschitzInfo& lip);

// exp(mean |log ratio|) over off-diagonal entries; 1 means perfectly
// balanced indicators.
double eta_ratio_geomean_deviation(const Matrix& ratio);

} // namespace crmt
