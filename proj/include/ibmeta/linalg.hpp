#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "ibmeta/errors.hpp"

namespace ibmeta {

// Row-major dense matrix. Column vectors are n x 1.
struct DenseMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    DenseMatrix(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    int size() const { return rows * cols; }

    static DenseMatrix identity(int n);
    static DenseMatrix column(const std::vector<double>& v);
};

// Dense storage with zero strict upper triangle.
struct LowerTriangular {
    int dim = 0;
    std::vector<double> data;  // row-major dim x dim

    LowerTriangular() = default;
    explicit LowerTriangular(int n) : dim(n), data(static_cast<size_t>(n) * n, 0.0) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * dim + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * dim + c]; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * dim; }
};

struct GaussianNd {
    std::vector<double> mean;
    DenseMatrix cov;
    std::optional<LowerTriangular> chol;  // cached factor of cov, if already known
};

enum class TriSide { Lower, LowerTransposed };

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, bool trans_a = false,
                   bool trans_b = false);
DenseMatrix transpose(const DenseMatrix& a);
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);

// Factor a + jitter*I = L L^T. If the factorization breaks down, retries
// with escalating jitter (1e-10, 1e-8, 1e-6, each scaled by the mean
// diagonal magnitude) before giving up with NotPositiveDefinite.
LowerTriangular cholesky(const DenseMatrix& a, double jitter = 0.0);
// Single attempt, no escalation ladder.
LowerTriangular cholesky_exact(const DenseMatrix& a, double jitter = 0.0);

// Solve L x = b (Lower) or L^T x = b (LowerTransposed); b may have many columns.
DenseMatrix solve_triangular(const LowerTriangular& l, const DenseMatrix& b, TriSide side);

double mvn_logpdf(const std::vector<double>& x, const GaussianNd& g);
// KL(q || p) for full-covariance Gaussians of equal dimension.
double kl_gaussian(const GaussianNd& q, const GaussianNd& p);

// log N(m | 0, out_scale*Phi*Phi^T + diag(s)) without forming the n x n
// covariance; costs O(n M^2 + M^3) via the matrix inversion lemma.
double woodbury_logpdf(const DenseMatrix& phi, const std::vector<double>& s,
                       const std::vector<double>& m, double out_scale);

// Posterior mean and variance of f(x*) for the linear-feature Gaussian model
// with encoder sites (m, s): mean = phi*^T B^{-1} Phi^T S^{-1} m,
// var = phi*^T B^{-1} phi*, with B = Phi^T S^{-1} Phi + I/out_scale.
std::pair<double, double> woodbury_posterior(const DenseMatrix& phi, const std::vector<double>& s,
                                             const std::vector<double>& m, double out_scale,
                                             const std::vector<double>& phi_star);

}  // namespace ibmeta
