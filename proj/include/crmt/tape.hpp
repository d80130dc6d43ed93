#pragma once

#include "crmt/matrix.hpp"

#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace crmt {

// Reverse-mode differentiation over a flat list of primitive nodes. Enough
// for small MLP encoders, linear heads, cross-entropy, LogSumExp margins and
// l2 norms, with gradients available for parameters and inputs alike.
//
// Usage: declare variables and wire nodes (the program), then repeatedly
// forward() with fresh bindings and backward() for gradients. The program is
// frozen at the first forward. Copying a Tape shares the immutable program
// and gives the copy its own evaluation state, so parallel workers each
// clone the tape they evaluate.

using NodeId = int;

class Bindings {
public:
    Bindings& set(const std::string& name, const Matrix& m) {
        items_.emplace_back(name, &m);
        return *this;
    }
    const Matrix* find(std::string_view name) const {
        for (const auto& [n, m] : items_)
            if (n == name) return m;
        return nullptr;
    }

private:
    std::vector<std::pair<std::string, const Matrix*>> items_;
};

struct GradCheckEntry {
    std::string variable;
    double max_rel_error = 0.0;
    std::size_t worst_coord = 0;
    std::size_t skipped = 0; // coordinates near a relu kink
};

struct GradCheckReport {
    bool pass = true;
    double max_rel_error = 0.0;
    std::string worst_variable;
    std::vector<GradCheckEntry> entries;
};

class Tape {
public:
    Tape();
    Tape(const Tape& other);
    Tape& operator=(const Tape& other);
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    // -- program construction ------------------------------------------------
    NodeId var(const std::string& name, std::size_t rows, std::size_t cols);
    // Bindable but non-differentiable (labels, fixed inputs).
    NodeId input(const std::string& name, std::size_t rows, std::size_t cols);
    NodeId constant(Matrix value);

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b); // same shape, or b a 1 x cols bias row
    NodeId scale(NodeId a, double factor);
    NodeId relu(NodeId a);
    NodeId tanh(NodeId a);
    NodeId row_select(NodeId a, std::size_t row);
    NodeId dot(NodeId a, NodeId b);
    NodeId logsumexp(NodeId a); // per-row -> (rows, 1)
    NodeId softmax_cross_entropy(NodeId logits, NodeId labels); // mean over rows
    // per-row log sum_{k != y_i} exp(s_ik - s_iy): the smoothed margin term
    NodeId margin_logsumexp(NodeId scores, NodeId labels);
    NodeId l2_norm(NodeId a);
    NodeId sum(NodeId a);
    NodeId clamp(NodeId a, double lo, double hi);
    NodeId transpose(NodeId a);
    NodeId colscale(NodeId a, NodeId s); // (n,K) x (K,1) -> scale column k by s_k
    NodeId div(NodeId num, NodeId den); // elementwise, same shape

    void set_output(NodeId id);
    NodeId output() const;

    std::size_t node_rows(NodeId id) const;
    std::size_t node_cols(NodeId id) const;
    std::vector<std::string> variable_names() const;

    // -- evaluation ----------------------------------------------------------
    const Matrix& forward(const Bindings& bindings);
    double forward_scalar(const Bindings& bindings);
    void backward();

    const Matrix& value(NodeId id) const;
    const Matrix& grad(std::string_view variable) const;

    // Central-difference gradients, one entry per variable (in declaration
    // order). Independent of backward(); used as its oracle.
    std::vector<std::pair<std::string, Matrix>>
    finite_difference_gradients(const Bindings& bindings, double step);

    std::vector<std::pair<std::string, Matrix>> backward_gradients(const Bindings& bindings);

    GradCheckReport grad_check(const Bindings& bindings, double step, double tol);

    // Compares two gradient sets; exposed so fault-injection tests can feed a
    // corrupted analytic side against the finite-difference side.
    static GradCheckReport compare_gradients(
        const std::vector<std::pair<std::string, Matrix>>& analytic,
        const std::vector<std::pair<std::string, Matrix>>& reference, double tol);

private:
    struct Node;
    struct Program;

    NodeId push(Node n);
    void eval_node(NodeId id);
    void backprop_node(NodeId id);
    std::uint64_t relu_signature() const;

    std::shared_ptr<Program> prog_;
    std::vector<Matrix> values_;
    std::vector<Matrix> grads_;
    bool forwarded_ = false;
};

} // namespace crmt
