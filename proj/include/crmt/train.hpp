#pragma once

#include "crmt/attack.hpp"
#include "crmt/certify.hpp"
#include "crmt/dataset.hpp"
#include "crmt/model.hpp"
#include "crmt/tape.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace crmt {

enum class Optimizer { Sgd, SgdMomentum };

std::string optimizer_name(Optimizer o);
Optimizer optimizer_from_name(const std::string& name);

struct TrainConfig {
    double rho = 0.5;
    double lr_step1 = 0.05;
    double lr_step2 = 0.01;
    int epochs_step1 = 100;
    int epochs_step2 = 30;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    Optimizer optimizer = Optimizer::SgdMomentum;
    int iterations = 1; // repetitions of the (margin step, integration step) pair
    std::optional<AttackSpec> at_spec;
    bool step2_valid_only = false; // ablation: drop misclassified samples from L2

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double ce = 0.0;
    double l1 = 0.0;
    double l2 = 0.0;
    double mean_radius = 0.0;
    double clean_acc = 0.0;
    double orth_residual = 0.0;
};

struct TrainTrace {
    std::vector<EpochRecord> epochs;
    std::vector<std::string> notes;
};

// Numerically stabilized softmax cross-entropy, mean over rows.
double loss_ce(const Matrix& logits, const std::vector<int>& labels);

// Smoothed worst-class worst-modality margin penalty: mean over samples of
// log sum_m sum_{k != y} exp(s_k^(m) - s_y^(m)), computed in log space.
double loss_l1(const std::vector<Matrix>& scores, const std::vector<int>& labels);

// Cross-entropy joint training of the standard head (the preference baseline).
void train_jt(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
              TrainTrace& trace);

// Orthogonal-head joint training: cross-entropy only.
void train_ojt(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
               TrainTrace& trace);

// Margin step: minimize rho * L1 + CE over encoders, orthonormal rows and
// integration weights; rows are re-orthonormalized and weights clamped >= 0
// after every update.
void train_step1(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                 TrainTrace& trace);

// Integration step: encoders and rows frozen, maximize the mean signed
// certified bound over the integration weights a.
void train_step2(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                 const LipschitzInfo& lip, TrainTrace& trace);

// Full two-step procedure, optionally iterated.
void train_crmt(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                TrainTrace& trace);

// Same but the margin step consumes adversarial examples regenerated per
// batch from the current parameters.
void train_crmt_at(MultiModalModel& model, const Dataset& ds, const TrainConfig& cfg,
                   TrainTrace& trace);

void train_strategy(const std::string& strategy, MultiModalModel& model, const Dataset& ds,
                    const TrainConfig& cfg, TrainTrace& trace);

// Mean clamped certified radius over correctly classified samples plus clean
// accuracy; the per-epoch trace metric.
std::pair<double, double> mean_radius_and_accuracy(const MultiModalModel& model,
                                                   const Dataset& ds,
                                                   const LipschitzInfo& lip);

// --- loss tape builders (exposed for gradient checking) ---------------------

struct LossTape {
    Tape tape;
    NodeId loss = -1;
    NodeId ce_node = -1;
    NodeId l1_node = -1;
    std::vector<std::string> param_names;
};

// Cross-entropy over a batch for either head; parameters are differentiable
// variables, the batch ("x1".."xM", "y") binds as fixed inputs.
LossTape build_ce_tape(const MultiModalModel& model, std::size_t batch);

// rho * L1 + CE for the orthogonal head.
LossTape build_step1_tape(const MultiModalModel& model, std::size_t batch, double rho);

// One frozen sample of the integration objective.
struct Step2Sample {
    int y = 0;
    int j = 0;              // binding class
    Matrix scores;          // (M, K) raw per-modality class scores
};

// L2 = -(1/B) sum_i bound_i with "a1".."aM" as the trainable variables and
// everything else baked in as constants.
LossTape build_step2_tape(const std::vector<Step2Sample>& batch,
                          const std::vector<Matrix>& tau_class, const Matrix& head_bias);

} // namespace crmt
