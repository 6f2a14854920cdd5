#include "kvf/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace kvf {

UnitVector::UnitVector(std::vector<double> v) : data(std::move(v)) {
    const double n = norm2(data);
    if (std::abs(n - 1.0) > 1e-9) {
        throw InvalidArgument("UnitVector: norm " + std::to_string(n) +
                              " deviates from 1 by more than 1e-9");
    }
}

UnitVector UnitVector::normalized(std::vector<double> v) {
    const double n = norm2(v);
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw InvalidArgument("UnitVector::normalized: zero or non-finite input");
    }
    for (double& x : v) x /= n;
    // one more pass eliminates the residual rounding error for extreme scales
    const double n2 = norm2(v);
    for (double& x : v) x /= n2;
    UnitVector u;
    u.data = std::move(v);
    return u;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw InvalidArgument("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) {
                out.at(i, j) += aik * b.at(k, j);
            }
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    return out;
}

Matrix gram(const Matrix& m) {
    Matrix g(m.cols, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const auto row = m.row(r);
        for (std::size_t i = 0; i < m.cols; ++i) {
            const double ri = row[i];
            if (ri == 0.0) continue;
            for (std::size_t j = i; j < m.cols; ++j) g.at(i, j) += ri * row[j];
        }
    }
    for (std::size_t i = 0; i < m.cols; ++i)
        for (std::size_t j = 0; j < i; ++j) g.at(i, j) = g.at(j, i);
    return g;
}

std::vector<double> mat_vec(const Matrix& m, std::span<const double> v) {
    if (v.size() != m.cols) throw InvalidArgument("mat_vec: dimension mismatch");
    std::vector<double> out(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) out[i] = dot(m.row(i), v);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw InvalidArgument("softmax: empty input");
    double mx = logits[0];
    for (double x : logits) {
        if (std::isnan(x)) throw InvalidArgument("softmax: NaN input");
        mx = std::max(mx, x);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

namespace {

std::vector<double> seeded_gaussian(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = gauss(rng);
    return v;
}

void normalize_in_place(std::vector<double>& v) {
    const double n = norm2(v);
    if (n > 0.0)
        for (double& x : v) x /= n;
}

// Rayleigh quotient of the top eigenpair of `g` after `iters` power steps,
// used only to detect a near-degenerate gap.
double second_eigen_estimate(const Matrix& g, std::span<const double> v1,
                             std::uint64_t seed) {
    const std::size_t d = g.cols;
    // power iteration restricted to the complement of v1
    std::vector<double> w = seeded_gaussian(d, seed ^ 0x9e3779b97f4a7c15ULL);
    const double proj0 = dot(w, v1);
    for (std::size_t i = 0; i < d; ++i) w[i] -= proj0 * v1[i];
    normalize_in_place(w);
    double lambda2 = 0.0;
    for (int it = 0; it < 200; ++it) {
        std::vector<double> gw = mat_vec(g, w);
        const double p = dot(gw, v1);
        for (std::size_t i = 0; i < d; ++i) gw[i] -= p * v1[i];
        lambda2 = dot(w, gw);
        const double n = norm2(gw);
        if (n == 0.0) break;
        for (std::size_t i = 0; i < d; ++i) w[i] = gw[i] / n;
    }
    return lambda2;
}

}  // namespace

TopDirectionResult top_singular_direction(const Matrix& m, double tol,
                                          std::size_t max_iters,
                                          std::uint64_t seed) {
    if (m.empty()) throw InvalidArgument("top_singular_direction: empty matrix");
    if (!(tol > 0.0)) throw InvalidArgument("top_singular_direction: tol must be > 0");

    const Matrix g = gram(m);
    const std::size_t d = g.cols;

    std::vector<double> v = seeded_gaussian(d, seed);
    normalize_in_place(v);

    double lambda = 0.0;
    bool converged = false;
    for (std::size_t it = 0; it < max_iters; ++it) {
        std::vector<double> gv = mat_vec(g, v);
        lambda = dot(v, gv);  // Rayleigh quotient (v is unit)
        double resid = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double r = gv[i] - lambda * v[i];
            resid += r * r;
        }
        resid = std::sqrt(resid);
        if (resid <= tol * std::abs(lambda) || (lambda == 0.0 && resid == 0.0)) {
            converged = true;
            break;
        }
        const double n = norm2(gv);
        if (n == 0.0) {  // v landed in the null space; restart from a new seed
            v = seeded_gaussian(d, seed + it + 1);
            normalize_in_place(v);
            continue;
        }
        for (std::size_t i = 0; i < d; ++i) v[i] = gv[i] / n;
    }
    if (!converged) {
        throw ConvergenceError("top_singular_direction: no convergence within " +
                                   std::to_string(max_iters) + " iterations",
                               v);
    }

    // sign canonicalization: largest-magnitude entry positive
    std::size_t imax = 0;
    for (std::size_t i = 1; i < d; ++i)
        if (std::abs(v[i]) > std::abs(v[imax])) imax = i;
    if (v[imax] < 0.0)
        for (double& x : v) x = -x;
    normalize_in_place(v);

    TopDirectionResult res;
    res.sigma = std::sqrt(std::max(lambda, 0.0));
    if (d > 1 && lambda > 0.0) {
        const double lambda2 = second_eigen_estimate(g, v, seed);
        res.gap_flag = lambda2 / lambda > 0.999;
    } else if (lambda == 0.0) {
        res.gap_flag = true;
    }
    UnitVector u;
    u.data = std::move(v);
    res.direction = std::move(u);
    return res;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw InvalidArgument("cosine_similarity: dimension mismatch");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0)
        throw InvalidArgument("cosine_similarity: zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2)
        throw InvalidArgument("pearson_correlation: need equal lengths >= 2");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw DegenerateInput("pearson_correlation: constant input vector");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2)
        throw InvalidArgument("spearman_rho: need equal lengths >= 2");
    const std::vector<double> rx = average_ranks(x);
    const std::vector<double> ry = average_ranks(y);
    try {
        return pearson_correlation(rx, ry);
    } catch (const DegenerateInput&) {
        throw DegenerateInput("spearman_rho: constant input vector, rho undefined");
    }
}

}  // namespace kvf
