#include "crmt/errors.hpp"
#include "crmt/matrix.hpp"
#include "crmt/prng.hpp"
#include "crmt/tape.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>

using namespace crmt;

namespace {

Matrix random_matrix(SplitMix64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.gaussian();
    return m;
}

// Straight-line two-layer tanh network evaluation, independent of the tape.
double straight_line_mlp(const Matrix& x, const Matrix& w1, const Matrix& b1,
                         const Matrix& w2, const Matrix& b2, const Matrix& v) {
    Matrix h = x.matmul(w1);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::tanh(h[i] + b1[i]);
    Matrix z = h.matmul(w2);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += b2[i];
    double out = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) out += z[i] * v[i];
    return out;
}

struct MlpTape {
    Tape tape;
    Bindings bind(const Matrix& x, const Matrix& w1, const Matrix& b1, const Matrix& w2,
                  const Matrix& b2) const {
        Bindings b;
        b.set("x", x).set("w1", w1).set("b1", b1).set("w2", w2).set("b2", b2);
        return b;
    }
};

MlpTape make_mlp_tape(std::size_t d, std::size_t h, const Matrix& v) {
    MlpTape t;
    NodeId x = t.tape.var("x", 1, d);
    NodeId w1 = t.tape.var("w1", d, h);
    NodeId b1 = t.tape.var("b1", 1, h);
    NodeId w2 = t.tape.var("w2", h, h);
    NodeId b2 = t.tape.var("b2", 1, h);
    NodeId hid = t.tape.tanh(t.tape.add(t.tape.matmul(x, w1), b1));
    NodeId out = t.tape.add(t.tape.matmul(hid, w2), b2);
    t.tape.set_output(t.tape.dot(out, t.tape.constant(v)));
    return t;
}

} // namespace

TEST_CASE("square via dot: forward and gradient") {
    Tape t;
    NodeId w = t.var("w", 1, 1);
    t.set_output(t.dot(w, w));
    Matrix w0(1, 1, 3.0);
    Bindings b;
    b.set("w", w0);
    CHECK(t.forward_scalar(b) == doctest::Approx(9.0));
    t.backward();
    CHECK(t.grad("w")(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("logsumexp of [0,0] is ln 2") {
    Tape t;
    NodeId x = t.var("x", 1, 2);
    t.set_output(t.logsumexp(x));
    Matrix x0(1, 2, 0.0);
    Bindings b;
    b.set("x", x0);
    CHECK(t.forward_scalar(b) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("l2 norm gradient is the unit direction") {
    Tape t;
    NodeId x = t.var("x", 1, 2);
    t.set_output(t.l2_norm(x));
    Matrix x0 = Matrix::from_rows({{3.0, 4.0}});
    Bindings b;
    b.set("x", x0);
    CHECK(t.forward_scalar(b) == doctest::Approx(5.0));
    t.backward();
    CHECK(t.grad("x")(0, 0) == doctest::Approx(0.6));
    CHECK(t.grad("x")(0, 1) == doctest::Approx(0.8));
}

TEST_CASE("two-layer network forward matches a straight-line reimplementation") {
    SplitMix64 rng(42);
    const std::size_t d = 5, h = 7;
    Matrix v = random_matrix(rng, 1, h);
    Matrix x = random_matrix(rng, 1, d);
    Matrix w1 = random_matrix(rng, d, h, 0.5);
    Matrix b1 = random_matrix(rng, 1, h, 0.1);
    Matrix w2 = random_matrix(rng, h, h, 0.5);
    Matrix b2 = random_matrix(rng, 1, h, 0.1);

    MlpTape t = make_mlp_tape(d, h, v);
    double got = t.tape.forward_scalar(t.bind(x, w1, b1, w2, b2));
    double expected = straight_line_mlp(x, w1, b1, w2, b2, v);
    CHECK(got == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("forward is deterministic bit for bit") {
    SplitMix64 rng(43);
    Matrix v = random_matrix(rng, 1, 4);
    MlpTape t = make_mlp_tape(3, 4, v);
    Matrix x = random_matrix(rng, 1, 3), w1 = random_matrix(rng, 3, 4),
           b1 = random_matrix(rng, 1, 4), w2 = random_matrix(rng, 4, 4),
           b2 = random_matrix(rng, 1, 4);
    double a = t.tape.forward_scalar(t.bind(x, w1, b1, w2, b2));
    double b = t.tape.forward_scalar(t.bind(x, w1, b1, w2, b2));
    CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("random MLP gradients match central finite differences") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        SplitMix64 rng(seed);
        Matrix v = random_matrix(rng, 1, 6);
        MlpTape t = make_mlp_tape(4, 6, v);
        Matrix x = random_matrix(rng, 1, 4), w1 = random_matrix(rng, 4, 6, 0.6),
               b1 = random_matrix(rng, 1, 6, 0.2), w2 = random_matrix(rng, 6, 6, 0.6),
               b2 = random_matrix(rng, 1, 6, 0.2);
        GradCheckReport rep = t.tape.grad_check(t.bind(x, w1, b1, w2, b2), 1e-5, 1e-4);
        CHECK(rep.pass);
        CHECK(rep.max_rel_error <= 1e-4);
    }
}

TEST_CASE("gradients flow to inputs and parameters from one backward pass") {
    SplitMix64 rng(44);
    Matrix v = random_matrix(rng, 1, 4);
    MlpTape t = make_mlp_tape(3, 4, v);
    Matrix x = random_matrix(rng, 1, 3), w1 = random_matrix(rng, 3, 4),
           b1 = random_matrix(rng, 1, 4), w2 = random_matrix(rng, 4, 4),
           b2 = random_matrix(rng, 1, 4);
    t.tape.forward(t.bind(x, w1, b1, w2, b2));
    t.tape.backward();
    CHECK(t.tape.grad("x").norm_l2() > 0.0);
    CHECK(t.tape.grad("w1").norm_l2() > 0.0);
    CHECK(t.tape.grad("b2").norm_l2() > 0.0);
}

TEST_CASE("grad_check passes on a linear model and names a corrupted variable") {
    Tape t;
    NodeId x = t.var("x", 1, 3);
    NodeId w = t.var("w", 1, 3);
    t.set_output(t.dot(x, w));
    Matrix x0 = Matrix::from_rows({{1.0, -2.0, 0.5}});
    Matrix w0 = Matrix::from_rows({{0.3, 0.7, -1.1}});
    Bindings b;
    b.set("x", x0).set("w", w0);

    GradCheckReport rep = t.grad_check(b, 1e-5, 1e-4);
    CHECK(rep.pass);

    auto analytic = t.backward_gradients(b);
    auto fd = t.finite_difference_gradients(b, 1e-5);
    analytic[1].second(0, 0) += 0.1; // corrupt w
    GradCheckReport bad = Tape::compare_gradients(analytic, fd, 1e-4);
    CHECK_FALSE(bad.pass);
    CHECK(bad.worst_variable == "w");
}

TEST_CASE("grad_check passes on a tanh two-layer MLP") {
    SplitMix64 rng(45);
    Matrix v = random_matrix(rng, 1, 5);
    MlpTape t = make_mlp_tape(4, 5, v);
    Matrix x = random_matrix(rng, 1, 4), w1 = random_matrix(rng, 4, 5, 0.7),
           b1 = random_matrix(rng, 1, 5, 0.3), w2 = random_matrix(rng, 5, 5, 0.7),
           b2 = random_matrix(rng, 1, 5, 0.3);
    GradCheckReport rep = t.tape.grad_check(t.bind(x, w1, b1, w2, b2), 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("relu kink-adjacent coordinates are skipped in finite differences") {
    Tape t;
    NodeId x = t.var("x", 1, 2);
    t.set_output(t.sum(t.relu(x)));
    Matrix x0 = Matrix::from_rows({{1e-7, 1.0}}); // first coordinate sits at the kink
    Bindings b;
    b.set("x", x0);
    GradCheckReport rep = t.grad_check(b, 1e-5, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.entries[0].skipped == 1);
}

TEST_CASE("softmax cross-entropy examples") {
    Tape t;
    NodeId z = t.var("z", 1, 2);
    NodeId y = t.input("y", 1, 1);
    t.set_output(t.softmax_cross_entropy(z, y));
    Matrix label(1, 1, 0.0);

    Matrix z0(1, 2, 0.0);
    Bindings b;
    b.set("z", z0).set("y", label);
    CHECK(t.forward_scalar(b) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Matrix z1 = Matrix::from_rows({{10.0, -10.0}});
    Bindings b1;
    b1.set("z", z1).set("y", label);
    CHECK(t.forward_scalar(b1) == doctest::Approx(2.061153622439e-9).epsilon(1e-6));
}

TEST_CASE("margin logsumexp matches a direct evaluation and differentiates") {
    Tape t;
    NodeId s = t.var("s", 2, 3);
    NodeId y = t.input("y", 2, 1);
    t.set_output(t.sum(t.margin_logsumexp(s, y)));
    Matrix s0 = Matrix::from_rows({{2.0, 0.5, -1.0}, {0.0, 1.0, 3.0}});
    Matrix y0 = Matrix::from_rows({{0.0}, {2.0}});
    Bindings b;
    b.set("s", s0).set("y", y0);

    auto direct = [](double a, double c, double sy) {
        return std::log(std::exp(a - sy) + std::exp(c - sy));
    };
    double expected = direct(0.5, -1.0, 2.0) + direct(0.0, 1.0, 3.0);
    CHECK(t.forward_scalar(b) == doctest::Approx(expected).epsilon(1e-12));

    GradCheckReport rep = t.grad_check(b, 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("div and colscale differentiate correctly") {
    SplitMix64 rng(46);
    Tape t;
    NodeId a = t.var("a", 2, 3);
    NodeId s = t.var("s", 3, 1);
    NodeId scaled = t.colscale(a, s);
    NodeId num = t.sum(scaled);
    NodeId den = t.l2_norm(a);
    t.set_output(t.div(num, den));
    Matrix a0 = random_matrix(rng, 2, 3);
    Matrix s0 = random_matrix(rng, 3, 1);
    Bindings b;
    b.set("a", a0).set("s", s0);
    GradCheckReport rep = t.grad_check(b, 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("clamp and transpose differentiate correctly") {
    SplitMix64 rng(47);
    Tape t;
    NodeId a = t.var("a", 3, 2);
    NodeId tr = t.transpose(a);
    NodeId cl = t.clamp(tr, -0.5, 0.5);
    t.set_output(t.sum(cl));
    Matrix a0 = random_matrix(rng, 3, 2);
    Bindings b;
    b.set("a", a0);
    GradCheckReport rep = t.grad_check(b, 1e-6, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("error paths") {
    Tape t;
    NodeId x = t.var("x", 1, 2);
    NodeId w = t.var("w", 2, 2);
    t.set_output(t.sum(t.matmul(x, w)));

    SUBCASE("backward before forward") {
        CHECK_THROWS_AS(t.backward(), UsageError);
    }
    SUBCASE("unbound variable") {
        Matrix x0(1, 2, 1.0);
        Bindings b;
        b.set("x", x0);
        CHECK_THROWS_AS(t.forward(b), UsageError);
    }
    SUBCASE("wrong binding shape") {
        Matrix x0(1, 3, 1.0);
        Matrix w0(2, 2, 1.0);
        Bindings b;
        b.set("x", x0).set("w", w0);
        CHECK_THROWS_AS(t.forward(b), ShapeError);
    }
    SUBCASE("shape mismatch at build names the op") {
        Tape t2;
        NodeId a = t2.var("a", 1, 2);
        NodeId c = t2.var("c", 3, 1);
        CHECK_THROWS_WITH_AS(t2.matmul(a, c), doctest::Contains("matmul"), ShapeError);
    }
    SUBCASE("non-finite intermediate is an overflow error") {
        Tape t2;
        NodeId a = t2.var("a", 1, 1);
        t2.set_output(t2.div(a, t2.constant(Matrix(1, 1, 0.0))));
        Matrix a0(1, 1, 1.0);
        Bindings b;
        b.set("a", a0);
        CHECK_THROWS_AS(t2.forward(b), OverflowError);
    }
}

TEST_CASE("cloned tapes share structure but evaluate independently") {
    Tape t;
    NodeId x = t.var("x", 1, 1);
    t.set_output(t.dot(x, x));
    Matrix x0(1, 1, 2.0);
    Bindings b0;
    b0.set("x", x0);
    t.forward(b0);

    Tape clone = t; // shares the program, fresh evaluation state
    Matrix x1(1, 1, 5.0);
    Bindings b1;
    b1.set("x", x1);
    CHECK(clone.forward_scalar(b1) == doctest::Approx(25.0));
    CHECK(t.forward_scalar(b0) == doctest::Approx(4.0));
}
