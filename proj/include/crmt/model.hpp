#pragma once

#include "crmt/matrix.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace crmt {

enum class Activation { Relu, Tanh, Identity };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct EncoderLayer {
    Matrix weight; // (in, out)
    Matrix bias;   // (1, out)
    Activation act = Activation::Tanh;
};

// Per-modality feature extractor: a small MLP with 1-Lipschitz activations.
struct Encoder {
    std::vector<EncoderLayer> layers;

    std::size_t input_dim() const { return layers.front().weight.rows(); }
    std::size_t output_dim() const { return layers.back().weight.cols(); }
};

// Joint linear head: logits = sum_m W^(m) phi^(m)(x^(m)) + b.
struct StandardHead {
    std::vector<Matrix> w_parts; // per modality, (K, dim(phi_m))
    Matrix bias;                 // (1, K)
};

// Head with per-modality orthonormal class rows and nonnegative reliability
// weights: logit_k = sum_m a_k^(m) * (W_k.^(m) phi^(m)) + b_k.
struct OrthogonalHead {
    std::vector<Matrix> w_rows; // per modality, (K, dim(phi_m)), orthonormal rows
    std::vector<Matrix> a;      // per modality, (K, 1), entries >= 0
    Matrix bias;                // (1, K)
};

// Max tolerated ||W W^T - I||_max before forward_orth refuses to run.
inline constexpr double kOrthonormalityTolerance = 1e-6;

struct MultiModalModel {
    std::vector<Encoder> encoders;
    std::variant<StandardHead, OrthogonalHead> head;
    int k = 0;
    std::uint64_t init_seed = 0;

    std::size_t modalities() const { return encoders.size(); }
    bool is_orthogonal() const { return std::holds_alternative<OrthogonalHead>(head); }
    const StandardHead& standard_head() const;
    const OrthogonalHead& orthogonal_head() const;
    StandardHead& standard_head();
    OrthogonalHead& orthogonal_head();
    std::vector<std::size_t> modality_dims() const;
};

struct ForwardResult {
    Matrix logits;                   // (n, K)
    std::vector<Matrix> embeddings;  // per modality, (n, dim(phi_m))
    std::vector<Matrix> scores;      // orthogonal head only: per modality (n, K)
};

// Batch-capable encoder pass; rows are samples.
Matrix encode(const Encoder& enc, const Matrix& x);

ForwardResult forward(const MultiModalModel& model, const std::vector<Matrix>& xs);

// Head-checked entry points.
Matrix forward_standard(const MultiModalModel& model, const std::vector<Matrix>& xs);
ForwardResult forward_orth(const MultiModalModel& model, const std::vector<Matrix>& xs);

int predict(const MultiModalModel& model, const std::vector<Matrix>& xs);
std::vector<int> predict_batch(const MultiModalModel& model, const std::vector<Matrix>& xs);

double max_orthonormality_residual(const MultiModalModel& model);
double min_a_entry(const MultiModalModel& model);

enum class HeadKind { Standard, Orthogonal };

struct ModelConfig {
    std::vector<std::size_t> modality_dims;
    std::vector<std::size_t> hidden; // widths of the encoder MLP layers
    Activation activation = Activation::Tanh;
    bool linear_output = true; // last encoder layer skips the activation
    int k = 2;
    HeadKind head = HeadKind::Orthogonal;
};

// Deterministic initialization: encoder weights are Gaussian scaled by
// 1/sqrt(fan_in), orthogonal heads start from an orthonormalized Gaussian and
// a = 1, biases start at zero.
MultiModalModel init_model(const ModelConfig& config, std::uint64_t seed);

// Checkpoint: one file, a single-line JSON manifest followed by the raw
// little-endian float64 parameters in declared order (per modality: encoder
// layer weight then bias; then the head: per-modality W, per-modality a for
// orthogonal heads, then bias). Round-trips bit-exactly.
void save_model(const MultiModalModel& model, const std::filesystem::path& path);
MultiModalModel load_model(const std::filesystem::path& path);

bool models_bit_equal(const MultiModalModel& a, const MultiModalModel& b);

} // namespace crmt
