#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace crmt {

// Dense row-major matrix of 64-bit floats. All model parameters, samples and
// gradients live in this type. Row vectors (1 x d) represent single samples;
// batches stack samples as rows.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix row_vector(const std::vector<double>& v);
    static Matrix col_vector(const std::vector<double>& v);
    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    Matrix row(std::size_t r) const;
    void set_row(std::size_t r, const Matrix& v);

    Matrix matmul(const Matrix& other) const;
    Matrix transposed() const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool bit_equal(const Matrix& other) const;

    double norm_l2() const;       // Frobenius / vector l2 norm
    double max_abs() const;
    double sum() const;
    bool all_finite() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

double dot(const Matrix& a, const Matrix& b);

// Largest singular value by power iteration on W^T W. Stops after max_iter
// rounds or when the estimate's relative change drops below tol.
double spectral_norm(const Matrix& w, int max_iter = 100, double tol = 1e-10);

// Row-orthonormal factor spanning the same row space, via modified
// Gram-Schmidt with a second projection pass. Requires rows <= cols and
// numerically independent rows (relative residual tolerance 1e-10).
Matrix orthonormalize(const Matrix& w);

// max |W W^T - I| entry; how far the rows are from orthonormal.
double orthonormality_residual(const Matrix& w);

} // namespace crmt
