#include "crmt/matrix.hpp"

#include "crmt/errors.hpp"
#include "crmt/prng.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace crmt {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
    std::size_t r = 0;
    for (const auto& row : rows) {
        if (row.size() != m.cols_)
            throw ShapeError("from_rows: ragged initializer");
        std::size_t c = 0;
        for (double v : row) m(r, c++) = v;
        ++r;
    }
    return m;
}

Matrix Matrix::row_vector(const std::vector<double>& v) {
    Matrix m(1, v.size());
    std::memcpy(m.data(), v.data(), v.size() * sizeof(double));
    return m;
}

Matrix Matrix::col_vector(const std::vector<double>& v) {
    Matrix m(v.size(), 1);
    std::memcpy(m.data(), v.data(), v.size() * sizeof(double));
    return m;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::row(std::size_t r) const {
    if (r >= rows_) throw ShapeError("row index out of range");
    Matrix out(1, cols_);
    std::memcpy(out.data(), data_.data() + r * cols_, cols_ * sizeof(double));
    return out;
}

void Matrix::set_row(std::size_t r, const Matrix& v) {
    if (r >= rows_ || v.size() != cols_)
        throw ShapeError("set_row: incompatible row");
    std::memcpy(data_.data() + r * cols_, v.data(), cols_ * sizeof(double));
}

Matrix Matrix::matmul(const Matrix& other) const {
    if (cols_ != other.rows_)
        throw ShapeError("matmul: " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                         " * " + std::to_string(other.rows_) + "x" + std::to_string(other.cols_));
    Matrix out(rows_, other.cols_);
    const std::size_t n = rows_, k = cols_, p = other.cols_;
    for (std::size_t i = 0; i < n; ++i) {
        double* out_row = out.data() + i * p;
        const double* a_row = data_.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double a = a_row[j];
            if (a == 0.0) continue;
            const double* b_row = other.data() + j * p;
            for (std::size_t c = 0; c < p; ++c) out_row[c] += a * b_row[c];
        }
    }
    return out;
}

Matrix Matrix::transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    return out;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("operator+=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) throw ShapeError("operator-=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

bool Matrix::bit_equal(const Matrix& other) const {
    return same_shape(other) &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

double Matrix::norm_l2() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
}

double Matrix::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

bool Matrix::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double dot(const Matrix& a, const Matrix& b) {
    if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double spectral_norm(const Matrix& w, int max_iter, double tol) {
    if (w.size() == 0) return 0.0;
    // Fixed-seed start vector keeps estimates deterministic.
    SplitMix64 rng(0x5eedULL);
    Matrix v(w.cols(), 1);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.gaussian();
    double vn = v.norm_l2();
    if (vn == 0.0) v[0] = 1.0; else v *= 1.0 / vn;

    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        Matrix u = w.matmul(v);
        double un = u.norm_l2();
        if (un == 0.0) return 0.0;
        double prev = sigma;
        sigma = un; // ||W v|| with unit v: a Rayleigh estimate of sigma_max
        u *= 1.0 / un;
        Matrix wu = w.transposed().matmul(u);
        double wn = wu.norm_l2();
        if (wn == 0.0) break;
        v = wu * (1.0 / wn);
        if (it > 0 && std::fabs(sigma - prev) <= tol * sigma) break;
    }
    return sigma;
}

Matrix orthonormalize(const Matrix& w) {
    if (w.rows() > w.cols())
        throw UsageError("orthonormalize: more rows than columns");
    Matrix q = w;
    const std::size_t k = w.rows(), d = w.cols();
    for (std::size_t r = 0; r < k; ++r) {
        double orig_norm = w.row(r).norm_l2();
        // two projection passes against the rows already fixed
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t p = 0; p < r; ++p) {
                double proj = 0.0;
                for (std::size_t c = 0; c < d; ++c) proj += q(r, c) * q(p, c);
                for (std::size_t c = 0; c < d; ++c) q(r, c) -= proj * q(p, c);
            }
        }
        double n = 0.0;
        for (std::size_t c = 0; c < d; ++c) n += q(r, c) * q(r, c);
        n = std::sqrt(n);
        if (n < 1e-10 * std::max(1.0, orig_norm))
            throw DegenerateError("orthonormalize: row " + std::to_string(r) +
                                  " is numerically dependent on earlier rows");
        for (std::size_t c = 0; c < d; ++c) q(r, c) /= n;
    }
    return q;
}

double orthonormality_residual(const Matrix& w) {
    Matrix g = w.matmul(w.transposed());
    for (std::size_t i = 0; i < w.rows(); ++i) g(i, i) -= 1.0;
    return g.max_abs();
}

} // namespace crmt
