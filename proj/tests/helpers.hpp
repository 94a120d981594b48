#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "ibmeta/errors.hpp"
#include "ibmeta/linalg.hpp"
#include "ibmeta/rng.hpp"

namespace testutil {

using ibmeta::DenseMatrix;
using ibmeta::Rng;

#ifdef IBMETA_TEST_TMP
// scratch directory for tests that touch the filesystem
inline std::string tmp_dir() {
    std::filesystem::create_directories(IBMETA_TEST_TMP);
    return IBMETA_TEST_TMP;
}
#endif

inline DenseMatrix random_matrix(Rng& rng, int rows, int cols, double sd = 1.0) {
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = rng.normal(0.0, sd);
    return m;
}

// Condition-number proxy for the gram phi phi^T: the squared ratio of extreme
// Cholesky diagonal entries. Scale-invariant, and +inf when the factorization
// fails outright. Oracle comparisons that factor the raw gram are only
// meaningful to tight tolerances when this is moderate.
inline double gram_cond_proxy(const DenseMatrix& phi) {
    const DenseMatrix g = ibmeta::matmul(phi, phi, false, true);
    try {
        const ibmeta::LowerTriangular l = ibmeta::cholesky_exact(g);
        double lo = 1e300, hi = 0.0;
        for (int i = 0; i < l.dim; ++i) {
            const double d = l.data[static_cast<size_t>(i) * l.dim + i];
            lo = std::min(lo, d);
            hi = std::max(hi, d);
        }
        return (hi / lo) * (hi / lo);
    } catch (const ibmeta::NotPositiveDefinite&) {
        return std::numeric_limits<double>::infinity();
    }
}

// B B^T + ridge I: symmetric and safely positive definite
inline DenseMatrix random_pd(Rng& rng, int n, double ridge = 0.5) {
    const DenseMatrix b = random_matrix(rng, n, n);
    DenseMatrix a = ibmeta::matmul(b, b, false, true);
    for (int i = 0; i < n; ++i) a.at(i, i) += ridge;
    return a;
}

inline double frobenius(const DenseMatrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    return max_abs_diff(a.data, b.data);
}

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max({std::abs(got), std::abs(want), 1e-12});
}

// Plain Gauss-Jordan inverse: an oracle independent of the library's
// Cholesky-based solves. Only for small test matrices.
inline DenseMatrix gauss_jordan_inverse(DenseMatrix a) {
    const int n = a.rows;
    DenseMatrix inv = DenseMatrix::identity(n);
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
        for (int c = 0; c < n; ++c) {
            std::swap(a.at(col, c), a.at(pivot, c));
            std::swap(inv.at(col, c), inv.at(pivot, c));
        }
        const double p = a.at(col, col);
        for (int c = 0; c < n; ++c) {
            a.at(col, c) /= p;
            inv.at(col, c) /= p;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a.at(r, col);
            for (int c = 0; c < n; ++c) {
                a.at(r, c) -= f * a.at(col, c);
                inv.at(r, c) -= f * inv.at(col, c);
            }
        }
    }
    return inv;
}

inline std::vector<double> mat_vec(const DenseMatrix& a, const std::vector<double>& x) {
    std::vector<double> out(a.rows, 0.0);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out[i] += a.at(i, j) * x[j];
    return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace testutil
