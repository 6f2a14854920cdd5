#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvf/errors.hpp"

namespace kvf {

// Dense row-major matrix of doubles. All internal math is done in double;
// 32-bit floats appear only at file-format boundaries.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    bool empty() const { return rows == 0 || cols == 0; }
};

// Vector constrained to unit Euclidean norm (within 1e-9).
struct UnitVector {
    std::vector<double> data;

    UnitVector() = default;
    explicit UnitVector(std::vector<double> v);  // validates norm

    // Normalizes v to unit length; throws InvalidArgument on (near-)zero input.
    static UnitVector normalized(std::vector<double> v);

    std::size_t dim() const { return data.size(); }
};

struct TopDirectionResult {
    UnitVector direction;
    bool gap_flag = false;   // near-degenerate leading spectrum
    double sigma = 0.0;      // estimate of the top singular value of M
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
// M^T M, the Gram matrix of the columns of M.
Matrix gram(const Matrix& m);

std::vector<double> mat_vec(const Matrix& m, std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// Numerically stable softmax (max subtraction). Output sums to 1 within 1e-12.
std::vector<double> softmax(std::span<const double> logits);

// Dominant right singular direction of M via power iteration on M^T M.
// The sign is canonicalized so the largest-magnitude entry is positive;
// callers that need a different sign convention re-sign the result.
// gap_flag is set when the second Rayleigh estimate exceeds 0.999 of the
// first (near-degenerate spectrum).
TopDirectionResult top_singular_direction(const Matrix& m, double tol = 1e-6,
                                          std::size_t max_iters = 10000,
                                          std::uint64_t seed = 0);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

double pearson_correlation(std::span<const double> x, std::span<const double> y);

// Average ranks (1-based); ties get the mean of their rank span.
std::vector<double> average_ranks(std::span<const double> v);

// Spearman rank correlation with average-rank tie handling.
// Throws DegenerateInput when either vector is constant.
double spearman_rho(std::span<const double> x, std::span<const double> y);

}  // namespace kvf
