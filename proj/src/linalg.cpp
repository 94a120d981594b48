#include "ibmeta/linalg.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "ibmeta/simd.hpp"

namespace ibmeta {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void require(bool ok, const char* msg) {
    if (!ok) throw DimensionMismatch(msg);
}
}  // namespace

DenseMatrix DenseMatrix::identity(int n) {
    DenseMatrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

DenseMatrix DenseMatrix::column(const std::vector<double>& v) {
    DenseMatrix m(static_cast<int>(v.size()), 1);
    m.data = v;
    return m;
}

DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b, bool trans_a, bool trans_b) {
    const auto& k = simd::active();
    const int ar = trans_a ? a.cols : a.rows;
    const int ac = trans_a ? a.rows : a.cols;
    const int br = trans_b ? b.cols : b.rows;
    const int bc = trans_b ? b.rows : b.cols;
    require(ac == br, "matmul: inner dimensions differ");
    DenseMatrix c(ar, bc);
    if (!trans_a && !trans_b) {
        for (int i = 0; i < ar; ++i) {
            double* ci = c.row(i);
            const double* ai = a.row(i);
            for (int t = 0; t < ac; ++t) k.axpy(ai[t], b.row(t), ci, static_cast<size_t>(bc));
        }
    } else if (!trans_a && trans_b) {
        for (int i = 0; i < ar; ++i) {
            double* ci = c.row(i);
            const double* ai = a.row(i);
            for (int j = 0; j < bc; ++j) ci[j] = k.dot(ai, b.row(j), static_cast<size_t>(ac));
        }
    } else if (trans_a && !trans_b) {
        for (int t = 0; t < a.rows; ++t) {
            const double* at = a.row(t);
            const double* bt = b.row(t);
            for (int i = 0; i < ar; ++i) k.axpy(at[i], bt, c.row(i), static_cast<size_t>(bc));
        }
    } else {
        DenseMatrix tmp = matmul(b, a, false, false);  // (B A)^T = A^T B^T
        c = transpose(tmp);
    }
    return c;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows == b.rows && a.cols == b.cols, "add: shapes differ");
    DenseMatrix c(a.rows, a.cols);
    simd::active().add(a.data.data(), b.data.data(), c.data.data(), a.data.size());
    return c;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.rows == b.rows && a.cols == b.cols, "sub: shapes differ");
    DenseMatrix c(a.rows, a.cols);
    simd::active().sub(a.data.data(), b.data.data(), c.data.data(), a.data.size());
    return c;
}

namespace {

bool try_cholesky(const DenseMatrix& a, double jitter, LowerTriangular& l) {
    const auto& k = simd::active();
    const int n = a.rows;
    for (int j = 0; j < n; ++j) {
        double d = a.at(j, j) + jitter - k.dot(l.row(j), l.row(j), static_cast<size_t>(j));
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double ljj = std::sqrt(d);
        l.at(j, j) = ljj;
        for (int i = j + 1; i < n; ++i) {
            const double off = a.at(i, j) - k.dot(l.row(i), l.row(j), static_cast<size_t>(j));
            l.at(i, j) = off / ljj;
        }
    }
    return true;
}

}  // namespace

LowerTriangular cholesky_exact(const DenseMatrix& a, double jitter) {
    require(a.rows == a.cols, "cholesky: matrix not square");
    LowerTriangular l(a.rows);
    if (!try_cholesky(a, jitter, l))
        throw NotPositiveDefinite("cholesky: matrix not positive definite at jitter " +
                                  std::to_string(jitter));
    return l;
}

LowerTriangular cholesky(const DenseMatrix& a, double jitter) {
    require(a.rows == a.cols, "cholesky: matrix not square");
    const int n = a.rows;
    double diag_scale = 0.0;
    for (int i = 0; i < n; ++i) diag_scale += std::fabs(a.at(i, i));
    diag_scale = n > 0 ? diag_scale / n : 1.0;
    if (diag_scale <= 0.0) diag_scale = 1.0;

    const double ladder[] = {0.0, 1e-10, 1e-8, 1e-6};
    LowerTriangular l(n);
    for (double step : ladder) {
        std::fill(l.data.begin(), l.data.end(), 0.0);
        if (try_cholesky(a, jitter + step * diag_scale, l)) return l;
    }
    throw NotPositiveDefinite("cholesky: matrix not positive definite after jitter ladder");
}

DenseMatrix solve_triangular(const LowerTriangular& l, const DenseMatrix& b, TriSide side) {
    require(l.dim == b.rows, "solve_triangular: dimensions differ");
    const auto& k = simd::active();
    const int n = l.dim;
    const int m = b.cols;
    DenseMatrix x = b;
    if (side == TriSide::Lower) {
        for (int i = 0; i < n; ++i) {
            double* xi = x.row(i);
            const double* li = l.row(i);
            for (int t = 0; t < i; ++t) k.axpy(-li[t], x.row(t), xi, static_cast<size_t>(m));
            k.scale(1.0 / li[i], xi, static_cast<size_t>(m));
        }
    } else {
        for (int i = n - 1; i >= 0; --i) {
            double* xi = x.row(i);
            for (int t = i + 1; t < n; ++t)
                k.axpy(-l.at(t, i), x.row(t), xi, static_cast<size_t>(m));
            k.scale(1.0 / l.at(i, i), xi, static_cast<size_t>(m));
        }
    }
    return x;
}

double mvn_logpdf(const std::vector<double>& x, const GaussianNd& g) {
    const int d = static_cast<int>(g.mean.size());
    require(static_cast<int>(x.size()) == d, "mvn_logpdf: dimension mismatch");
    const LowerTriangular l = g.chol ? *g.chol : cholesky(g.cov, 0.0);
    DenseMatrix r(d, 1);
    for (int i = 0; i < d; ++i) r.at(i, 0) = x[i] - g.mean[i];
    DenseMatrix w = solve_triangular(l, r, TriSide::Lower);
    const double quad = simd::active().dot(w.data.data(), w.data.data(), w.data.size());
    double logdet_half = 0.0;
    for (int i = 0; i < d; ++i) logdet_half += std::log(l.at(i, i));
    return -0.5 * quad - logdet_half - 0.5 * d * kLog2Pi;
}

double kl_gaussian(const GaussianNd& q, const GaussianNd& p) {
    const int d = static_cast<int>(q.mean.size());
    require(static_cast<int>(p.mean.size()) == d, "kl_gaussian: dimension mismatch");
    const LowerTriangular lq = q.chol ? *q.chol : cholesky(q.cov, 0.0);
    const LowerTriangular lp = p.chol ? *p.chol : cholesky(p.cov, 0.0);

    DenseMatrix lq_dense(d, d);
    lq_dense.data = lq.data;
    DenseMatrix m = solve_triangular(lp, lq_dense, TriSide::Lower);
    const double trace = simd::active().dot(m.data.data(), m.data.data(), m.data.size());

    DenseMatrix r(d, 1);
    for (int i = 0; i < d; ++i) r.at(i, 0) = q.mean[i] - p.mean[i];
    DenseMatrix w = solve_triangular(lp, r, TriSide::Lower);
    const double quad = simd::active().dot(w.data.data(), w.data.data(), w.data.size());

    double logdet_diff = 0.0;
    for (int i = 0; i < d; ++i) logdet_diff += std::log(lp.at(i, i)) - std::log(lq.at(i, i));
    return 0.5 * (trace + quad - d) + logdet_diff;
}

namespace {

// B = Phi^T diag(1/s) Phi + I/out_scale and t = Phi^T diag(1/s) m.
void woodbury_normal_eqs(const DenseMatrix& phi, const std::vector<double>& s,
                         const std::vector<double>& m, double out_scale, DenseMatrix& b_out,
                         std::vector<double>& t_out) {
    const auto& k = simd::active();
    const int n = phi.rows;
    const int dim = phi.cols;
    require(static_cast<int>(s.size()) == n, "woodbury: s size mismatch");
    require(static_cast<int>(m.size()) == n, "woodbury: m size mismatch");
    if (!(out_scale > 0.0)) throw DimensionMismatch("woodbury: out_scale must be positive");

    b_out = DenseMatrix(dim, dim);
    t_out.assign(static_cast<size_t>(dim), 0.0);
    for (int i = 0; i < n; ++i) {
        if (!(s[i] > 0.0)) throw DimensionMismatch("woodbury: encoder variances must be positive");
        const double w = 1.0 / s[i];
        const double* row = phi.row(i);
        for (int a = 0; a < dim; ++a)
            k.axpy(w * row[a], row, b_out.row(a), static_cast<size_t>(dim));
        k.axpy(w * m[i], row, t_out.data(), static_cast<size_t>(dim));
    }
    for (int a = 0; a < dim; ++a) b_out.at(a, a) += 1.0 / out_scale;
}

}  // namespace

double woodbury_logpdf(const DenseMatrix& phi, const std::vector<double>& s,
                       const std::vector<double>& m, double out_scale) {
    const auto& k = simd::active();
    const int n = phi.rows;
    const int dim = phi.cols;
    DenseMatrix b;
    std::vector<double> t;
    woodbury_normal_eqs(phi, s, m, out_scale, b, t);
    const LowerTriangular lb = cholesky(b, 0.0);
    DenseMatrix w = solve_triangular(lb, DenseMatrix::column(t), TriSide::Lower);

    double quad = -k.dot(w.data.data(), w.data.data(), w.data.size());
    double logdet = dim * std::log(out_scale);
    for (int i = 0; i < n; ++i) {
        quad += m[i] * m[i] / s[i];
        logdet += std::log(s[i]);
    }
    for (int a = 0; a < dim; ++a) logdet += 2.0 * std::log(lb.at(a, a));
    return -0.5 * (quad + logdet + n * kLog2Pi);
}

std::pair<double, double> woodbury_posterior(const DenseMatrix& phi, const std::vector<double>& s,
                                             const std::vector<double>& m, double out_scale,
                                             const std::vector<double>& phi_star) {
    const auto& k = simd::active();
    const int dim = phi.cols;
    require(static_cast<int>(phi_star.size()) == dim, "woodbury_posterior: phi* size mismatch");
    DenseMatrix b;
    std::vector<double> t;
    woodbury_normal_eqs(phi, s, m, out_scale, b, t);
    const LowerTriangular lb = cholesky(b, 0.0);

    DenseMatrix u = solve_triangular(lb, DenseMatrix::column(phi_star), TriSide::Lower);
    const double var = k.dot(u.data.data(), u.data.data(), u.data.size());

    DenseMatrix z = solve_triangular(lb, DenseMatrix::column(t), TriSide::Lower);
    z = solve_triangular(lb, z, TriSide::LowerTransposed);
    const double mean = k.dot(phi_star.data(), z.data.data(), z.data.size());
    return {mean, var};
}

}  // namespace ibmeta
