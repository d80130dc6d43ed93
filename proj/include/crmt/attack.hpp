#pragma once

#include "crmt/matrix.hpp"
#include "crmt/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace crmt {

enum class AttackFamily { Fgm, PgdL2, GaussianNoise, FeatureMask, Missing };

std::string attack_family_name(AttackFamily f);
AttackFamily attack_family_from_name(const std::string& name);

struct AttackSpec {
    AttackFamily family = AttackFamily::PgdL2;
    double epsilon = 0.0;    // l2 budget; noise sigma / mask fraction for those families
    int steps = 20;          // pgd only
    double step_size = 0.0;  // pgd only; 0 selects 2.5 * epsilon / steps
    std::vector<std::size_t> targets; // modality indices; empty = all
    std::uint64_t seed = 0;

    std::vector<std::size_t> resolved_targets(std::size_t n_modalities) const;
};

struct AttackResult {
    std::vector<Matrix> x;        // perturbed sample
    bool success = false;         // prediction differs from the true label
    std::vector<double> norms;    // achieved l2 per modality
    double total_norm = 0.0;
    bool zero_gradient = false;   // gradient vanished; sample returned unchanged
};

// One normalized gradient step of size epsilon on the cross-entropy,
// restricted to the target modalities.
AttackResult fgm(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                 const AttackSpec& spec);

// Iterative ascent with per-step normalized gradients, projecting the
// cumulative perturbation onto the epsilon ball after every step.
AttackResult pgd_l2(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                    const AttackSpec& spec);

// Zero-fills the single target modality.
AttackResult missing_modality(const MultiModalModel& model, const std::vector<Matrix>& xs,
                              int y, const AttackSpec& spec);

// Additive seeded Gaussian noise (epsilon = sigma).
AttackResult gaussian_noise(const MultiModalModel& model, const std::vector<Matrix>& xs,
                            int y, const AttackSpec& spec);

// Seeded uniform zeroing of a fraction of coordinates (epsilon = fraction).
AttackResult feature_mask(const MultiModalModel& model, const std::vector<Matrix>& xs,
                          int y, const AttackSpec& spec);

AttackResult run_attack(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                        const AttackSpec& spec);

// Empirical upper bound on the minimal adversarial radius: doubles epsilon
// until a strengthened attack (100 steps, 5 restarts, per-step success
// checks) succeeds, then bisects to width tol and returns the smallest
// epsilon that produced an adversarial example. Infinity when 40 doublings
// never succeed. Every certified radius must sit at or below this value.
double min_radius_oracle(const MultiModalModel& model, const std::vector<Matrix>& xs, int y,
                         const std::vector<std::size_t>& targets, double tol,
                         std::uint64_t seed);

} // namespace crmt
