#include "crmt/tape.hpp"

#include "crmt/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

namespace crmt {

namespace {

const char* op_name(int op);

int label_at(const Matrix& labels, std::size_t row, std::size_t k_classes,
             const std::string& where) {
    double v = labels(row, 0);
    int y = static_cast<int>(v);
    if (static_cast<double>(y) != v || y < 0 || static_cast<std::size_t>(y) >= k_classes)
        throw UsageError(where + ": label " + std::to_string(v) + " at row " +
                         std::to_string(row) + " is not a class index < " +
                         std::to_string(k_classes));
    return y;
}

} // namespace

enum class Op : int {
    Const,
    Var,
    MatMul,
    Add,
    Scale,
    Relu,
    Tanh,
    RowSelect,
    Dot,
    LogSumExp,
    SoftmaxCrossEntropy,
    MarginLogSumExp,
    L2Norm,
    Sum,
    Clamp,
    Transpose,
    ColScale,
    Div,
};

struct Tape::Node {
    Op op;
    NodeId a = -1;
    NodeId b = -1;
    double p0 = 0.0;
    double p1 = 0.0;
    std::size_t index = 0; // row for RowSelect, constant slot for Const
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::string name; // variables only
    bool needs_grad = false;
};

struct Tape::Program {
    std::vector<Node> nodes;
    std::vector<Matrix> constants;
    std::vector<std::pair<std::string, NodeId>> variables; // differentiable
    std::vector<std::pair<std::string, NodeId>> inputs;    // bind-only
    NodeId output = -1;
    bool frozen = false;

    NodeId find_bindable(std::string_view name) const {
        for (const auto& [n, id] : variables)
            if (n == name) return id;
        for (const auto& [n, id] : inputs)
            if (n == name) return id;
        return -1;
    }
};

namespace {
const char* op_name(int op) {
    switch (static_cast<Op>(op)) {
        case Op::Const: return "const";
        case Op::Var: return "var";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Scale: return "scale";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::RowSelect: return "row_select";
        case Op::Dot: return "dot";
        case Op::LogSumExp: return "logsumexp";
        case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
        case Op::MarginLogSumExp: return "margin_logsumexp";
        case Op::L2Norm: return "l2_norm";
        case Op::Sum: return "sum";
        case Op::Clamp: return "clamp";
        case Op::Transpose: return "transpose";
        case Op::ColScale: return "colscale";
        case Op::Div: return "div";
    }
    return "?";
}

std::string node_desc(int id, int op) {
    return std::string(op_name(op)) + "#" + std::to_string(id);
}
} // namespace

Tape::Tape() : prog_(std::make_shared<Program>()) {}

Tape::Tape(const Tape& other) : prog_(other.prog_) {}

Tape& Tape::operator=(const Tape& other) {
    prog_ = other.prog_;
    values_.clear();
    grads_.clear();
    forwarded_ = false;
    return *this;
}

NodeId Tape::push(Node n) {
    if (prog_->frozen)
        throw UsageError("tape: cannot grow the program after the first forward");
    if (n.a >= 0) n.needs_grad = n.needs_grad || prog_->nodes[n.a].needs_grad;
    if (n.b >= 0) n.needs_grad = n.needs_grad || prog_->nodes[n.b].needs_grad;
    prog_->nodes.push_back(std::move(n));
    return static_cast<NodeId>(prog_->nodes.size() - 1);
}

NodeId Tape::var(const std::string& name, std::size_t rows, std::size_t cols) {
    if (prog_->find_bindable(name) >= 0)
        throw UsageError("tape: duplicate variable '" + name + "'");
    Node n;
    n.op = Op::Var;
    n.rows = rows;
    n.cols = cols;
    n.name = name;
    n.needs_grad = true;
    NodeId id = push(std::move(n));
    prog_->variables.emplace_back(name, id);
    return id;
}

NodeId Tape::input(const std::string& name, std::size_t rows, std::size_t cols) {
    if (prog_->find_bindable(name) >= 0)
        throw UsageError("tape: duplicate variable '" + name + "'");
    Node n;
    n.op = Op::Var;
    n.rows = rows;
    n.cols = cols;
    n.name = name;
    n.needs_grad = false;
    NodeId id = push(std::move(n));
    prog_->inputs.emplace_back(name, id);
    return id;
}

NodeId Tape::constant(Matrix value) {
    Node n;
    n.op = Op::Const;
    n.rows = value.rows();
    n.cols = value.cols();
    n.index = prog_->constants.size();
    prog_->constants.push_back(std::move(value));
    return push(std::move(n));
}

#define CRMT_CHECK_ID(id)                                                              \
    if ((id) < 0 || static_cast<std::size_t>(id) >= prog_->nodes.size())               \
        throw UsageError("tape: invalid node id");

NodeId Tape::matmul(NodeId a, NodeId b) {
    CRMT_CHECK_ID(a);
    CRMT_CHECK_ID(b);
    const Node& na = prog_->nodes[a];
    const Node& nb = prog_->nodes[b];
    if (na.cols != nb.rows)
        throw ShapeError("tape matmul: " + std::to_string(na.rows) + "x" + std::to_string(na.cols) +
                         " * " + std::to_string(nb.rows) + "x" + std::to_string(nb.cols));
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = nb.cols;
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    CRMT_CHECK_ID(a);
    CRMT_CHECK_ID(b);
    const Node& na = prog_->nodes[a];
    const Node& nb = prog_->nodes[b];
    bool same = na.rows == nb.rows && na.cols == nb.cols;
    bool bias_row = nb.rows == 1 && nb.cols == na.cols;
    if (!same && !bias_row)
        throw ShapeError("tape add: shapes " + std::to_string(na.rows) + "x" + std::to_string(na.cols) +
                         " + " + std::to_string(nb.rows) + "x" + std::to_string(nb.cols));
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.rows = na.rows;
    n.cols = na.cols;
    return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.p0 = factor;
    n.rows = prog_->nodes[a].rows;
    n.cols = prog_->nodes[a].cols;
    return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::Relu;
    n.a = a;
    n.rows = prog_->nodes[a].rows;
    n.cols = prog_->nodes[a].cols;
    return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::Tanh;
    n.a = a;
    n.rows = prog_->nodes[a].rows;
    n.cols = prog_->nodes[a].cols;
    return push(std::move(n));
}

NodeId Tape::row_select(NodeId a, std::size_t row) {
    CRMT_CHECK_ID(a);
    const Node& na = prog_->nodes[a];
    if (row >= na.rows)
        throw ShapeError("tape row_select: row " + std::to_string(row) + " of " +
                         std::to_string(na.rows));
    Node n;
    n.op = Op::RowSelect;
    n.a = a;
    n.index = row;
    n.rows = 1;
    n.cols = na.cols;
    return push(std::move(n));
}

NodeId Tape::dot(NodeId a, NodeId b) {
    CRMT_CHECK_ID(a);
    CRMT_CHECK_ID(b);
    const Node& na = prog_->nodes[a];
    const Node& nb = prog_->nodes[b];
    if (na.rows * na.cols != nb.rows * nb.cols)
        throw ShapeError("tape dot: element counts differ");
    Node n;
    n.op = Op::Dot;
    n.a = a;
    n.b = b;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Tape::logsumexp(NodeId a) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::LogSumExp;
    n.a = a;
    n.rows = prog_->nodes[a].rows;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Tape::softmax_cross_entropy(NodeId logits, NodeId labels) {
    CRMT_CHECK_ID(logits);
    CRMT_CHECK_ID(labels);
    const Node& nl = prog_->nodes[logits];
    const Node& ny = prog_->nodes[labels];
    if (ny.cols != 1 || ny.rows != nl.rows)
        throw ShapeError("tape softmax_cross_entropy: labels must be rows x 1");
    if (nl.cols < 2)
        throw ShapeError("tape softmax_cross_entropy: needs at least two classes");
    Node n;
    n.op = Op::SoftmaxCrossEntropy;
    n.a = logits;
    n.b = labels;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Tape::margin_logsumexp(NodeId scores, NodeId labels) {
    CRMT_CHECK_ID(scores);
    CRMT_CHECK_ID(labels);
    const Node& ns = prog_->nodes[scores];
    const Node& ny = prog_->nodes[labels];
    if (ny.cols != 1 || ny.rows != ns.rows)
        throw ShapeError("tape margin_logsumexp: labels must be rows x 1");
    if (ns.cols < 2)
        throw ShapeError("tape margin_logsumexp: needs at least two classes");
    Node n;
    n.op = Op::MarginLogSumExp;
    n.a = scores;
    n.b = labels;
    n.rows = ns.rows;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Tape::l2_norm(NodeId a) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::L2Norm;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::Sum;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    return push(std::move(n));
}

NodeId Tape::clamp(NodeId a, double lo, double hi) {
    CRMT_CHECK_ID(a);
    if (lo > hi) throw UsageError("tape clamp: lo > hi");
    Node n;
    n.op = Op::Clamp;
    n.a = a;
    n.p0 = lo;
    n.p1 = hi;
    n.rows = prog_->nodes[a].rows;
    n.cols = prog_->nodes[a].cols;
    return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
    CRMT_CHECK_ID(a);
    Node n;
    n.op = Op::Transpose;
    n.a = a;
    n.rows = prog_->nodes[a].cols;
    n.cols = prog_->nodes[a].rows;
    return push(std::move(n));
}

NodeId Tape::colscale(NodeId a, NodeId s) {
    CRMT_CHECK_ID(a);
    CRMT_CHECK_ID(s);
    const Node& na = prog_->nodes[a];
    const Node& ns = prog_->nodes[s];
    if (ns.cols != 1 || ns.rows != na.cols)
        throw ShapeError("tape colscale: scales must be cols x 1");
    Node n;
    n.op = Op::ColScale;
    n.a = a;
    n.b = s;
    n.rows = na.rows;
    n.cols = na.cols;
    return push(std::move(n));
}

NodeId Tape::div(NodeId num, NodeId den) {
    CRMT_CHECK_ID(num);
    CRMT_CHECK_ID(den);
    const Node& na = prog_->nodes[num];
    const Node& nb = prog_->nodes[den];
    if (na.rows != nb.rows || na.cols != nb.cols)
        throw ShapeError("tape div: shape mismatch");
    Node n;
    n.op = Op::Div;
    n.a = num;
    n.b = den;
    n.rows = na.rows;
    n.cols = na.cols;
    return push(std::move(n));
}

void Tape::set_output(NodeId id) {
    CRMT_CHECK_ID(id);
    prog_->output = id;
}

NodeId Tape::output() const { return prog_->output; }

std::size_t Tape::node_rows(NodeId id) const { return prog_->nodes.at(id).rows; }
std::size_t Tape::node_cols(NodeId id) const { return prog_->nodes.at(id).cols; }

std::vector<std::string> Tape::variable_names() const {
    std::vector<std::string> out;
    out.reserve(prog_->variables.size());
    for (const auto& [n, id] : prog_->variables) out.push_back(n);
    return out;
}

void Tape::eval_node(NodeId id) {
    const Node& n = prog_->nodes[id];
    Matrix& out = values_[id];
    auto val = [&](NodeId i) -> const Matrix& { return values_[i]; };
    switch (n.op) {
        case Op::Const:
            out = prog_->constants[n.index];
            break;
        case Op::Var:
            break; // bound before evaluation
        case Op::MatMul:
            out = val(n.a).matmul(val(n.b));
            break;
        case Op::Add: {
            const Matrix& a = val(n.a);
            const Matrix& b = val(n.b);
            out = a;
            if (b.rows() == a.rows()) {
                out += b;
            } else { // bias row added to every row
                for (std::size_t r = 0; r < out.rows(); ++r)
                    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b(0, c);
            }
            break;
        }
        case Op::Scale:
            out = val(n.a) * n.p0;
            break;
        case Op::Relu: {
            const Matrix& a = val(n.a);
            out = a;
            for (std::size_t i = 0; i < out.size(); ++i)
                if (out[i] < 0.0) out[i] = 0.0;
            break;
        }
        case Op::Tanh: {
            const Matrix& a = val(n.a);
            out = Matrix(a.rows(), a.cols());
            for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::tanh(a[i]);
            break;
        }
        case Op::RowSelect:
            out = val(n.a).row(n.index);
            break;
        case Op::Dot: {
            out = Matrix(1, 1);
            const Matrix& a = val(n.a);
            const Matrix& b = val(n.b);
            double s = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
            out(0, 0) = s;
            break;
        }
        case Op::LogSumExp: {
            const Matrix& a = val(n.a);
            out = Matrix(a.rows(), 1);
            for (std::size_t r = 0; r < a.rows(); ++r) {
                double m = a(r, 0);
                for (std::size_t c = 1; c < a.cols(); ++c) m = std::max(m, a(r, c));
                double s = 0.0;
                for (std::size_t c = 0; c < a.cols(); ++c) s += std::exp(a(r, c) - m);
                out(r, 0) = m + std::log(s);
            }
            break;
        }
        case Op::SoftmaxCrossEntropy: {
            const Matrix& z = val(n.a);
            const Matrix& y = val(n.b);
            double total = 0.0;
            for (std::size_t r = 0; r < z.rows(); ++r) {
                int yi = label_at(y, r, z.cols(), "softmax_cross_entropy");
                double m = z(r, 0);
                for (std::size_t c = 1; c < z.cols(); ++c) m = std::max(m, z(r, c));
                double s = 0.0;
                for (std::size_t c = 0; c < z.cols(); ++c) s += std::exp(z(r, c) - m);
                total += std::log(s) - (z(r, static_cast<std::size_t>(yi)) - m);
            }
            out = Matrix(1, 1);
            out(0, 0) = total / static_cast<double>(z.rows());
            break;
        }
        case Op::MarginLogSumExp: {
            const Matrix& s = val(n.a);
            const Matrix& y = val(n.b);
            out = Matrix(s.rows(), 1);
            for (std::size_t r = 0; r < s.rows(); ++r) {
                int yi = label_at(y, r, s.cols(), "margin_logsumexp");
                double sy = s(r, static_cast<std::size_t>(yi));
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < s.cols(); ++c)
                    if (c != static_cast<std::size_t>(yi)) m = std::max(m, s(r, c) - sy);
                double acc = 0.0;
                for (std::size_t c = 0; c < s.cols(); ++c)
                    if (c != static_cast<std::size_t>(yi)) acc += std::exp(s(r, c) - sy - m);
                out(r, 0) = m + std::log(acc);
            }
            break;
        }
        case Op::L2Norm:
            out = Matrix(1, 1);
            out(0, 0) = val(n.a).norm_l2();
            break;
        case Op::Sum:
            out = Matrix(1, 1);
            out(0, 0) = val(n.a).sum();
            break;
        case Op::Clamp: {
            const Matrix& a = val(n.a);
            out = a;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = std::min(std::max(out[i], n.p0), n.p1);
            break;
        }
        case Op::Transpose:
            out = val(n.a).transposed();
            break;
        case Op::ColScale: {
            const Matrix& a = val(n.a);
            const Matrix& s = val(n.b);
            out = a;
            for (std::size_t r = 0; r < out.rows(); ++r)
                for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= s(c, 0);
            break;
        }
        case Op::Div: {
            const Matrix& a = val(n.a);
            const Matrix& b = val(n.b);
            out = Matrix(a.rows(), a.cols());
            for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / b[i];
            break;
        }
    }
    if (!out.all_finite())
        throw OverflowError("tape forward: non-finite value at node " +
                            node_desc(id, static_cast<int>(n.op)));
}

const Matrix& Tape::forward(const Bindings& bindings) {
    prog_->frozen = true;
    if (prog_->output < 0) throw UsageError("tape forward: no output node set");
    values_.resize(prog_->nodes.size());

    auto bind_list = [&](const std::vector<std::pair<std::string, NodeId>>& list) {
        for (const auto& [name, id] : list) {
            const Matrix* m = bindings.find(name);
            if (!m) throw UsageError("tape forward: unbound variable '" + name + "'");
            const Node& n = prog_->nodes[id];
            if (m->rows() != n.rows || m->cols() != n.cols)
                throw ShapeError("tape forward: variable '" + name + "' expects " +
                                 std::to_string(n.rows) + "x" + std::to_string(n.cols) +
                                 ", got " + std::to_string(m->rows()) + "x" +
                                 std::to_string(m->cols()));
            if (!m->all_finite())
                throw OverflowError("tape forward: non-finite binding for '" + name + "'");
            values_[id] = *m;
        }
    };
    bind_list(prog_->variables);
    bind_list(prog_->inputs);
    for (NodeId id = 0; id <= prog_->output; ++id) {
        if (prog_->nodes[id].op == Op::Var) continue;
        eval_node(id);
    }
    forwarded_ = true;
    return values_[prog_->output];
}

double Tape::forward_scalar(const Bindings& bindings) {
    const Matrix& v = forward(bindings);
    if (v.size() != 1) throw UsageError("tape forward_scalar: output is not 1x1");
    return v(0, 0);
}

void Tape::backward() {
    if (!forwarded_) throw UsageError("tape backward: forward has not been run");
    const Node& out_node = prog_->nodes[prog_->output];
    if (out_node.rows * out_node.cols != 1)
        throw UsageError("tape backward: output must be scalar");

    grads_.assign(prog_->nodes.size(), Matrix());
    auto ensure = [&](NodeId i) -> Matrix& {
        if (grads_[i].empty() && prog_->nodes[i].rows * prog_->nodes[i].cols > 0)
            grads_[i] = Matrix(prog_->nodes[i].rows, prog_->nodes[i].cols);
        return grads_[i];
    };
    ensure(prog_->output)(0, 0) = 1.0;

    for (NodeId id = prog_->output; id >= 0; --id) {
        const Node& n = prog_->nodes[id];
        if (!n.needs_grad || grads_[id].empty()) continue;
        const Matrix& g = grads_[id];
        auto val = [&](NodeId i) -> const Matrix& { return values_[i]; };
        auto wants = [&](NodeId i) { return i >= 0 && prog_->nodes[i].needs_grad; };
        switch (n.op) {
            case Op::Const:
            case Op::Var:
                break;
            case Op::MatMul: {
                if (wants(n.a)) ensure(n.a) += g.matmul(val(n.b).transposed());
                if (wants(n.b)) ensure(n.b) += val(n.a).transposed().matmul(g);
                break;
            }
            case Op::Add: {
                if (wants(n.a)) ensure(n.a) += g;
                if (wants(n.b)) {
                    Matrix& gb = ensure(n.b);
                    if (gb.rows() == g.rows()) {
                        gb += g;
                    } else {
                        for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                    }
                }
                break;
            }
            case Op::Scale:
                if (wants(n.a)) ensure(n.a) += g * n.p0;
                break;
            case Op::Relu: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                const Matrix& pre = val(n.a);
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (pre[i] > 0.0) ga[i] += g[i]; // subgradient at 0 is 0
                break;
            }
            case Op::Tanh: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                const Matrix& t = values_[id];
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * (1.0 - t[i] * t[i]);
                break;
            }
            case Op::RowSelect: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                for (std::size_t c = 0; c < n.cols; ++c) ga(n.index, c) += g(0, c);
                break;
            }
            case Op::Dot: {
                double gs = g(0, 0);
                if (wants(n.a)) ensure(n.a) += val(n.b) * gs;
                if (wants(n.b)) ensure(n.b) += val(n.a) * gs;
                break;
            }
            case Op::LogSumExp: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                const Matrix& a = val(n.a);
                const Matrix& lse = values_[id];
                for (std::size_t r = 0; r < a.rows(); ++r)
                    for (std::size_t c = 0; c < a.cols(); ++c)
                        ga(r, c) += g(r, 0) * std::exp(a(r, c) - lse(r, 0));
                break;
            }
            case Op::SoftmaxCrossEntropy: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                const Matrix& z = val(n.a);
                const Matrix& y = val(n.b);
                double gs = g(0, 0) / static_cast<double>(z.rows());
                for (std::size_t r = 0; r < z.rows(); ++r) {
                    int yi = label_at(y, r, z.cols(), "softmax_cross_entropy");
                    double m = z(r, 0);
                    for (std::size_t c = 1; c < z.cols(); ++c) m = std::max(m, z(r, c));
                    double s = 0.0;
                    for (std::size_t c = 0; c < z.cols(); ++c) s += std::exp(z(r, c) - m);
                    for (std::size_t c = 0; c < z.cols(); ++c) {
                        double p = std::exp(z(r, c) - m) / s;
                        ga(r, c) += gs * (p - (c == static_cast<std::size_t>(yi) ? 1.0 : 0.0));
                    }
                }
                break;
            }
            case Op::MarginLogSumExp: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                const Matrix& s = val(n.a);
                const Matrix& y = val(n.b);
                const Matrix& t = values_[id];
                for (std::size_t r = 0; r < s.rows(); ++r) {
                    int yi = label_at(y, r, s.cols(), "margin_logsumexp");
                    double sy = s(r, static_cast<std::size_t>(yi));
                    for (std::size_t c = 0; c < s.cols(); ++c) {
                        if (c == static_cast<std::size_t>(yi)) {
                            ga(r, c) -= g(r, 0);
                        } else {
                            ga(r, c) += g(r, 0) * std::exp(s(r, c) - sy - t(r, 0));
                        }
                    }
                }
                break;
            }
            case Op::L2Norm: {
                if (!wants(n.a)) break;
                double nv = values_[id](0, 0);
                if (nv > 0.0) ensure(n.a) += val(n.a) * (g(0, 0) / nv);
                break;
            }
            case Op::Sum: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                double gs = g(0, 0);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs;
                break;
            }
            case Op::Clamp: {
                if (!wants(n.a)) break;
                Matrix& ga = ensure(n.a);
                const Matrix& a = val(n.a);
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (a[i] >= n.p0 && a[i] <= n.p1) ga[i] += g[i];
                break;
            }
            case Op::Transpose:
                if (wants(n.a)) ensure(n.a) += g.transposed();
                break;
            case Op::ColScale: {
                const Matrix& a = val(n.a);
                const Matrix& s = val(n.b);
                if (wants(n.a)) {
                    Matrix& ga = ensure(n.a);
                    for (std::size_t r = 0; r < a.rows(); ++r)
                        for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) += g(r, c) * s(c, 0);
                }
                if (wants(n.b)) {
                    Matrix& gs = ensure(n.b);
                    for (std::size_t r = 0; r < a.rows(); ++r)
                        for (std::size_t c = 0; c < a.cols(); ++c) gs(c, 0) += g(r, c) * a(r, c);
                }
                break;
            }
            case Op::Div: {
                const Matrix& a = val(n.a);
                const Matrix& b = val(n.b);
                if (wants(n.a)) {
                    Matrix& ga = ensure(n.a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / b[i];
                }
                if (wants(n.b)) {
                    Matrix& gb = ensure(n.b);
                    for (std::size_t i = 0; i < gb.size(); ++i)
                        gb[i] -= g[i] * a[i] / (b[i] * b[i]);
                }
                break;
            }
        }
    }
}

const Matrix& Tape::value(NodeId id) const {
    if (!forwarded_) throw UsageError("tape value: forward has not been run");
    return values_.at(id);
}

const Matrix& Tape::grad(std::string_view variable) const {
    for (const auto& [name, id] : prog_->variables) {
        if (name == variable) {
            if (grads_.empty()) throw UsageError("tape grad: backward has not been run");
            return grads_[id];
        }
    }
    throw UsageError("tape grad: unknown variable '" + std::string(variable) + "'");
}

std::uint64_t Tape::relu_signature() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t id = 0; id < prog_->nodes.size(); ++id) {
        if (prog_->nodes[id].op != Op::Relu) continue;
        const Matrix& pre = values_[prog_->nodes[id].a];
        for (std::size_t i = 0; i < pre.size(); ++i) {
            h ^= (pre[i] > 0.0) ? 0x9eULL : 0x31ULL;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::vector<std::pair<std::string, Matrix>>
Tape::backward_gradients(const Bindings& bindings) {
    forward(bindings);
    backward();
    std::vector<std::pair<std::string, Matrix>> out;
    for (const auto& [name, id] : prog_->variables) {
        Matrix g = grads_[id].empty() ? Matrix(prog_->nodes[id].rows, prog_->nodes[id].cols)
                                      : grads_[id];
        out.emplace_back(name, std::move(g));
    }
    return out;
}

std::vector<std::pair<std::string, Matrix>>
Tape::finite_difference_gradients(const Bindings& bindings, double step) {
    if (step <= 0.0) throw UsageError("finite differences: step must be positive");
    forward(bindings);
    std::uint64_t base_sig = relu_signature();

    std::vector<std::pair<std::string, Matrix>> out;
    for (const auto& [name, id] : prog_->variables) {
        const Matrix* bound = bindings.find(name);
        Matrix perturbed = *bound;
        Matrix fd(bound->rows(), bound->cols());
        for (std::size_t i = 0; i < perturbed.size(); ++i) {
            double orig = perturbed[i];

            Bindings b2;
            for (const auto& [n2, id2] : prog_->variables)
                b2.set(n2, n2 == name ? perturbed : *bindings.find(n2));
            for (const auto& [n2, id2] : prog_->inputs) b2.set(n2, *bindings.find(n2));

            perturbed[i] = orig + step;
            double fp = forward_scalar(b2);
            std::uint64_t sig_p = relu_signature();
            perturbed[i] = orig - step;
            double fm = forward_scalar(b2);
            std::uint64_t sig_m = relu_signature();
            perturbed[i] = orig;

            if (sig_p != base_sig || sig_m != base_sig) {
                fd[i] = std::numeric_limits<double>::quiet_NaN(); // kink-adjacent, skip
            } else {
                fd[i] = (fp - fm) / (2.0 * step);
            }
        }
        out.emplace_back(name, std::move(fd));
    }
    forward(bindings); // restore caches at the base point
    return out;
}

GradCheckReport Tape::compare_gradients(
    const std::vector<std::pair<std::string, Matrix>>& analytic,
    const std::vector<std::pair<std::string, Matrix>>& reference, double tol) {
    GradCheckReport report;
    for (std::size_t v = 0; v < analytic.size(); ++v) {
        const auto& [name, ga] = analytic[v];
        const Matrix& gr = reference[v].second;
        GradCheckEntry entry;
        entry.variable = name;
        for (std::size_t i = 0; i < ga.size(); ++i) {
            if (std::isnan(gr[i])) {
                ++entry.skipped;
                continue;
            }
            double denom = std::max({1.0, std::fabs(ga[i]), std::fabs(gr[i])});
            double rel = std::fabs(ga[i] - gr[i]) / denom;
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_coord = i;
            }
        }
        if (entry.max_rel_error > report.max_rel_error) {
            report.max_rel_error = entry.max_rel_error;
            report.worst_variable = name;
        }
        if (entry.max_rel_error > tol) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

GradCheckReport Tape::grad_check(const Bindings& bindings, double step, double tol) {
    auto analytic = backward_gradients(bindings);
    auto fd = finite_difference_gradients(bindings, step);
    return compare_gradients(analytic, fd, tol);
}

} // namespace crmt
