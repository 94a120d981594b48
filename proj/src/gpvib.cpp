#include "ibmeta/gpvib.hpp"

#include <algorithm>
#include <cmath>

#include "ibmeta/simd.hpp"

namespace ibmeta {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double clampd(double x, double lo, double hi) { return x < lo ? lo : (x > hi ? hi : x); }

std::vector<double> ones(int n) { return std::vector<double>(n, 1.0); }

// c * A B^T over feature rows. matmul's NT kernel evaluates entry (i, j)
// and (j, i) as the same dot product, so the A == B case is exactly
// symmetric and safe to hand to the Cholesky.
DenseMatrix scaled_cross(const DenseMatrix& a, const DenseMatrix& b, double c) {
    DenseMatrix k = matmul(a, b, false, true);
    for (auto& v : k.data) v *= c;
    return k;
}

// The kernel spec with the live out-scale parameter value, when learned.
KernelSpec live_kernel(const GpVibModel& model) {
    KernelSpec k = model.cfg.kernel;
    if (k.learns_v() && model.params.has("kernel.v"))
        k.v = model.params.entry("kernel.v").value[0];
    return k;
}

// Classes ordered by first appearance in the support labels, with absent
// classes appended in ascending index. Reducing per-class sums in this
// order keeps objectives, probabilities, and gradients bitwise invariant
// under a joint label permutation with matched noise columns: the permuted
// run reduces the same values in the same sequence.
std::vector<int> canonical_class_order(const std::vector<int>& labels, int n_classes) {
    std::vector<int> order;
    order.reserve(n_classes);
    std::vector<char> seen(n_classes, 0);
    for (int y : labels) {
        if (y < 0 || y >= n_classes) throw DimensionMismatch("class label out of range");
        if (!seen[y]) {
            seen[y] = 1;
            order.push_back(y);
        }
    }
    for (int n = 0; n < n_classes; ++n)
        if (!seen[n]) order.push_back(n);
    return order;
}

DenseMatrix reorder_cols(const DenseMatrix& a, const std::vector<int>& order) {
    DenseMatrix out(a.rows, static_cast<int>(order.size()));
    for (int r = 0; r < a.rows; ++r)
        for (size_t c = 0; c < order.size(); ++c)
            out.at(r, static_cast<int>(c)) = a.at(r, order[c]);
    return out;
}

}  // namespace

double GpVibModel::sigma2() const {
    if (!params.has("lik.log_noise")) return 0.0;
    return clampd(std::exp(params.entry("lik.log_noise").value[0]), kNoiseLo, kNoiseHi);
}

GpVibModel make_gpvib_model(const VibConfig& cfg, int input_dim, const std::vector<int>& hidden,
                            Activation act, int n_classes, Rng& rng, bool augment_bias) {
    if (n_classes > 0 && cfg.encoder == EncoderKind::ExactPosterior)
        throw ConfigError("exact-posterior encoder requires a regression task", "vib.encoder");
    GpVibModel model;
    model.cfg = cfg;
    model.n_classes = n_classes;
    model.net.input_dim = input_dim;
    model.net.hidden = hidden;
    model.net.activation = act;
    model.net.augment_bias = augment_bias;
    model.heads.kind = cfg.encoder;
    model.net.init_params(model.params, rng);
    model.heads.init_params(model.params, model.net.feature_dim(), rng);
    if (cfg.kernel.learns_v()) model.params.add_scalar("kernel.v", cfg.kernel.v);
    if (n_classes == 0) model.params.add_scalar("lik.log_noise", cfg.log_noise_init);
    return model;
}

// ---------------- plain evaluation ----------------

EncoderSites build_sites(const GpVibModel& model, const Task& task) {
    EncoderSites sites;
    const KernelSpec ker = live_kernel(model);
    const DenseMatrix phi_t_raw = model.net.forward(task.x_support, model.params);
    const DenseMatrix phi_v_raw = model.net.forward(task.x_query, model.params);
    sites.phi_support = normalized_features(phi_t_raw, ker);
    sites.phi_query = normalized_features(phi_v_raw, ker);
    sites.out_scale = kernel_scale(ker, model.net.feature_dim());
    sites.sigma2 = model.sigma2();

    const int n_t = task.support_size();
    if (task.kind == TaskKind::Regression) {
        sites.m = DenseMatrix(n_t, 1);
        if (model.cfg.encoder == EncoderKind::ExactPosterior) {
            for (int j = 0; j < n_t; ++j) sites.m.at(j, 0) = task.y_support[j];
            sites.s.assign(n_t, sites.sigma2);
        } else {
            const auto mt = model.heads.m_tilde(phi_t_raw, model.params);
            for (int j = 0; j < n_t; ++j) sites.m.at(j, 0) = task.y_support[j] * mt[j];
            sites.s = model.heads.s_of(phi_t_raw, model.params);
        }
    } else {
        if (model.cfg.encoder == EncoderKind::ExactPosterior)
            throw ConfigError("exact-posterior encoder requires a regression task", "vib.encoder");
        const auto mt = model.heads.m_tilde(phi_t_raw, model.params);
        sites.m = class_mean_vectors(task.labels_support, mt, task.n_classes);
        sites.s = model.heads.s_of(phi_t_raw, model.params);
    }
    return sites;
}

namespace {

// Per-point moments of the encoder posterior at the support points and at
// the rows of phi_eval, plus the two log-marginal ingredients. Everything
// the objective needs, produced by either solve path.
struct MarginalStats {
    DenseMatrix mu_t, mu_q;    // n x C
    std::vector<double> v_t, v_q;
    std::vector<double> quad;  // per class: m^T (K+S)^{-1} m
    double logdet = 0.0;       // log |K + S|
};

MarginalStats stats_direct(const EncoderSites& sites, const DenseMatrix& phi_eval) {
    const int n_t = sites.phi_support.rows;
    const int n_q = phi_eval.rows;
    const int n_cls = sites.m.cols;
    const double c = sites.out_scale;
    const auto& kr = simd::active();

    DenseMatrix k_tt = scaled_cross(sites.phi_support, sites.phi_support, c);
    DenseMatrix ks = k_tt;
    for (int i = 0; i < n_t; ++i) ks.at(i, i) += sites.s[i];
    const LowerTriangular l = cholesky(ks);

    const DenseMatrix a = solve_triangular(l, sites.m, TriSide::Lower);
    MarginalStats st;
    st.quad.assign(n_cls, 0.0);
    for (int j = 0; j < n_t; ++j)
        for (int n = 0; n < n_cls; ++n) st.quad[n] += a.at(j, n) * a.at(j, n);
    for (int i = 0; i < n_t; ++i) st.logdet += 2.0 * std::log(l.at(i, i));

    const DenseMatrix w_t = solve_triangular(l, k_tt, TriSide::Lower);
    const DenseMatrix k_tq = scaled_cross(sites.phi_support, phi_eval, c);
    const DenseMatrix w_q = solve_triangular(l, k_tq, TriSide::Lower);
    st.mu_t = matmul(w_t, a, true, false);
    st.mu_q = matmul(w_q, a, true, false);

    st.v_t.assign(n_t, 0.0);
    for (int j = 0; j < n_t; ++j) {
        double acc = 0.0;
        for (int i = 0; i < n_t; ++i) acc += w_t.at(i, j) * w_t.at(i, j);
        st.v_t[j] = k_tt.at(j, j) - acc;
    }
    st.v_q.assign(n_q, 0.0);
    for (int j = 0; j < n_q; ++j) {
        double acc = 0.0;
        for (int i = 0; i < n_t; ++i) acc += w_q.at(i, j) * w_q.at(i, j);
        st.v_q[j] = c * kr.dot(phi_eval.row(j), phi_eval.row(j), phi_eval.cols) - acc;
    }
    return st;
}

MarginalStats stats_woodbury(const EncoderSites& sites, const DenseMatrix& phi_eval) {
    const int n_t = sites.phi_support.rows;
    const int n_q = phi_eval.rows;
    const int n_cls = sites.m.cols;
    const int m_dim = sites.phi_support.cols;
    const double c = sites.out_scale;
    const auto& kr = simd::active();

    DenseMatrix bmat(m_dim, m_dim);
    DenseMatrix bvec(m_dim, n_cls);
    for (int j = 0; j < n_t; ++j) {
        const double* phi = sites.phi_support.row(j);
        const double inv_s = 1.0 / sites.s[j];
        for (int r = 0; r < m_dim; ++r) kr.axpy(phi[r] * inv_s, phi, bmat.row(r), m_dim);
        for (int n = 0; n < n_cls; ++n) {
            const double w = sites.m.at(j, n) * inv_s;
            for (int r = 0; r < m_dim; ++r) bvec.at(r, n) += phi[r] * w;
        }
    }
    for (int d = 0; d < m_dim; ++d) bmat.at(d, d) += 1.0 / c;
    const LowerTriangular lb = cholesky(bmat);

    const DenseMatrix u = solve_triangular(lb, bvec, TriSide::Lower);
    MarginalStats st;
    st.quad.assign(n_cls, 0.0);
    for (int n = 0; n < n_cls; ++n) {
        double whitened = 0.0, corr = 0.0;
        for (int j = 0; j < n_t; ++j) whitened += sites.m.at(j, n) * sites.m.at(j, n) / sites.s[j];
        for (int d = 0; d < m_dim; ++d) corr += u.at(d, n) * u.at(d, n);
        st.quad[n] = whitened - corr;
    }
    st.logdet = m_dim * std::log(c);
    for (int j = 0; j < n_t; ++j) st.logdet += std::log(sites.s[j]);
    for (int d = 0; d < m_dim; ++d) st.logdet += 2.0 * std::log(lb.at(d, d));

    const DenseMatrix g = solve_triangular(lb, u, TriSide::LowerTransposed);  // B^{-1} bvec
    st.mu_t = matmul(sites.phi_support, g);
    st.mu_q = matmul(phi_eval, g);

    const DenseMatrix zt = solve_triangular(lb, transpose(sites.phi_support), TriSide::Lower);
    st.v_t.assign(n_t, 0.0);
    for (int j = 0; j < n_t; ++j) {
        double acc = 0.0;
        for (int d = 0; d < m_dim; ++d) acc += zt.at(d, j) * zt.at(d, j);
        st.v_t[j] = acc;
    }
    const DenseMatrix zq = solve_triangular(lb, transpose(phi_eval), TriSide::Lower);
    st.v_q.assign(n_q, 0.0);
    for (int j = 0; j < n_q; ++j) {
        double acc = 0.0;
        for (int d = 0; d < m_dim; ++d) acc += zq.at(d, j) * zq.at(d, j);
        st.v_q[j] = acc;
    }
    return st;
}

MarginalStats stats_for(SolvePath path, const EncoderSites& sites, const DenseMatrix& phi_eval) {
    return path == SolvePath::Direct ? stats_direct(sites, phi_eval)
                                     : stats_woodbury(sites, phi_eval);
}

ObjectiveParts parts_from_stats(const MarginalStats& st, const EncoderSites& sites,
                                const Task& task, double beta, const DenseMatrix* noise) {
    const int n_t = sites.phi_support.rows;
    const int n_cls = sites.m.cols;
    std::vector<int> order = {0};
    if (task.kind == TaskKind::Classification)
        order = canonical_class_order(task.labels_support, task.n_classes);

    double support_term = 0.0;
    for (int n : order)
        for (int j = 0; j < n_t; ++j) {
            const double d = sites.m.at(j, n) - st.mu_t.at(j, n);
            support_term += -0.5 * (kLog2Pi + std::log(sites.s[j])) -
                            (d * d + st.v_t[j]) / (2.0 * sites.s[j]);
        }
    double logmarg = 0.0;
    for (int n : order)
        logmarg += -0.5 * st.quad[n] - 0.5 * st.logdet - 0.5 * n_t * kLog2Pi;

    ObjectiveParts parts;
    parts.kl = support_term - logmarg;

    if (task.kind == TaskKind::Regression) {
        const double s2 = sites.sigma2;
        double fit = 0.0;
        for (size_t j = 0; j < task.y_query.size(); ++j) {
            const int ji = static_cast<int>(j);
            const double r = task.y_query[j] - st.mu_q.at(ji, 0);
            fit += -0.5 * (kLog2Pi + std::log(s2)) - (r * r + st.v_q[j]) / (2.0 * s2);
        }
        parts.datafit = fit;
    } else {
        if (noise == nullptr || noise->cols != n_cls)
            throw DimensionMismatch("classification objective needs noise draws, one column per class");
        const int n_v = task.query_size();
        if (n_v == 0 || noise->rows % n_v != 0)
            throw DimensionMismatch("classification noise rows must be a multiple of the query size");
        const int reps = noise->rows / n_v;
        std::vector<int> pos(n_cls, 0);
        for (int cidx = 0; cidx < n_cls; ++cidx) pos[order[cidx]] = cidx;
        std::vector<double> f(n_cls);
        double acc = 0.0;
        for (int row = 0; row < noise->rows; ++row) {
            const int j = row % n_v;
            const double sd = std::sqrt(std::max(st.v_q[j], 0.0));
            for (int cidx = 0; cidx < n_cls; ++cidx) {
                const int n = order[cidx];
                f[cidx] = st.mu_q.at(j, n) + sd * noise->at(row, n);
            }
            double mx = f[0];
            for (int cidx = 1; cidx < n_cls; ++cidx) mx = std::max(mx, f[cidx]);
            double se = 0.0;
            for (int cidx = 0; cidx < n_cls; ++cidx) se += std::exp(f[cidx] - mx);
            acc += f[pos[task.labels_query[j]]] - (mx + std::log(se));
        }
        parts.datafit = acc / reps;
    }
    parts.value = beta == 0.0 ? parts.datafit : parts.datafit - beta * parts.kl;
    return parts;
}

}  // namespace

ObjectiveParts objective_plain(const EncoderSites& sites, const Task& task, double beta,
                               SolvePath path, const DenseMatrix* noise) {
    const MarginalStats st = stats_for(path, sites, sites.phi_query);
    return parts_from_stats(st, sites, task, beta, noise);
}

double regression_objective_explicit_kl(const EncoderSites& sites,
                                        const std::vector<double>& y_query, double beta) {
    const int n_t = sites.phi_support.rows;
    const double c = sites.out_scale;
    const auto& kr = simd::active();

    const DenseMatrix k_tt = scaled_cross(sites.phi_support, sites.phi_support, c);
    DenseMatrix ks = k_tt;
    for (int i = 0; i < n_t; ++i) ks.at(i, i) += sites.s[i];
    const LowerTriangular l = cholesky(ks);
    const DenseMatrix a = solve_triangular(l, sites.m, TriSide::Lower);
    const DenseMatrix w = solve_triangular(l, k_tt, TriSide::Lower);

    GaussianNd q;
    const DenseMatrix mean_t = matmul(w, a, true, false);
    q.mean.assign(mean_t.data.begin(), mean_t.data.end());
    q.cov = sub(k_tt, matmul(w, w, true, false));
    GaussianNd p;
    p.mean.assign(n_t, 0.0);
    p.cov = k_tt;
    const double kl = kl_gaussian(q, p);

    const DenseMatrix k_tq = scaled_cross(sites.phi_support, sites.phi_query, c);
    const DenseMatrix w_q = solve_triangular(l, k_tq, TriSide::Lower);
    const DenseMatrix mu_q = matmul(w_q, a, true, false);
    const double s2 = sites.sigma2;
    double fit = 0.0;
    for (size_t j = 0; j < y_query.size(); ++j) {
        const int ji = static_cast<int>(j);
        double acc = 0.0;
        for (int i = 0; i < n_t; ++i) acc += w_q.at(i, ji) * w_q.at(i, ji);
        const double v =
            c * kr.dot(sites.phi_query.row(ji), sites.phi_query.row(ji), sites.phi_query.cols) -
            acc;
        const double r = y_query[j] - mu_q.at(ji, 0);
        fit += -0.5 * (kLog2Pi + std::log(s2)) - (r * r + v) / (2.0 * s2);
    }
    return fit - beta * kl;
}

// ---------------- tape objectives ----------------

namespace {

// Nodes every objective needs: features, kernel matrices, site variances,
// the Cholesky of K + S, and the whitened cross solves.
struct CommonGraph {
    ad::Var phi_t_raw;
    ad::Var mt;      // head means, n_t x 1 (unset for the exact encoder)
    ad::Var s_col;   // site variances, n_t x 1
    ad::Var sigma2;  // scalar, regression models only
    ad::Var l;
    ad::Var w_t;
    ad::Var w_v;
    ad::Var v_t;
    ad::Var v_v;
    ad::Var logdet;
};

CommonGraph common_graph(ad::Tape& t, const GpVibModel& model, const Task& task, ad::Var& k_tt_out) {
    const auto& ps = model.params;
    const KernelSpec& ker = model.cfg.kernel;
    const int m_dim = model.net.feature_dim();
    const int n_t = task.support_size();

    CommonGraph g;
    g.phi_t_raw = model.net.forward_tape(t, task.x_support, ps);
    const ad::Var phi_v_raw = model.net.forward_tape(t, task.x_query, ps);
    const ad::Var phin_t = normalized_features_tape(t, g.phi_t_raw, ker);
    const ad::Var phin_v = normalized_features_tape(t, phi_v_raw, ker);
    const ad::Var scale = kernel_scale_tape(t, ker, m_dim, ps);
    const ad::Var k_tt = gram_tape(t, phin_t, scale);
    const ad::Var k_tv = cross_gram_tape(t, phin_t, phin_v, scale);
    const ad::Var kdiag_v = gram_diag_tape(t, phin_v, scale);

    if (ps.has("lik.log_noise"))
        g.sigma2 = t.clamp(t.exp(t.param(ps, "lik.log_noise")), kNoiseLo, kNoiseHi);

    if (model.cfg.encoder == EncoderKind::ExactPosterior) {
        g.s_col = t.mul(t.constant(ones(n_t)), g.sigma2);
    } else {
        g.mt = model.heads.m_tilde_tape(t, g.phi_t_raw, ps);
        g.s_col = model.heads.s_tape(t, g.phi_t_raw, ps);
    }

    g.l = t.cholesky(t.add_diag(k_tt, g.s_col));
    g.w_t = t.tri_solve(g.l, k_tt);
    g.w_v = t.tri_solve(g.l, k_tv);
    g.v_t = t.sub(t.diag_part(k_tt), t.transpose(t.sum_cols(t.mul(g.w_t, g.w_t))));
    g.v_v = t.sub(kdiag_v, t.transpose(t.sum_cols(t.mul(g.w_v, g.w_v))));
    g.logdet = t.log_det_from_chol(g.l);
    k_tt_out = k_tt;
    return g;
}

}  // namespace

ObjectiveVars regression_objective_graph(ad::Tape& t, const GpVibModel& model, const Task& task) {
    if (task.kind != TaskKind::Regression)
        throw DimensionMismatch("regression objective needs a regression task");
    const int n_t = task.support_size();
    const int n_v = task.query_size();
    ad::Var k_tt;
    CommonGraph g = common_graph(t, model, task, k_tt);

    const ad::Var y_t = t.constant(task.y_support);
    const ad::Var m = model.cfg.encoder == EncoderKind::ExactPosterior ? y_t : t.mul(y_t, g.mt);
    const ad::Var a = t.tri_solve(g.l, m);
    const ad::Var mu_t = t.matmul(g.w_t, a, true, false);
    const ad::Var mu_v = t.matmul(g.w_v, a, true, false);

    const ad::Var r = t.sub(t.constant(task.y_query), mu_v);
    const ad::Var num = t.add(t.mul(r, r), g.v_v);
    const ad::Var inv_2s2 = t.powc(t.scale_add(g.sigma2, 2.0), -1.0);
    const ad::Var datafit =
        t.sub(t.scale_add(t.log(g.sigma2), -0.5 * n_v, -0.5 * n_v * kLog2Pi),
              t.mul(t.sum(num), inv_2s2));

    const ad::Var quad = t.sum(t.mul(a, a));
    const ad::Var logmarg = t.scale_add(t.add(quad, g.logdet), -0.5, -0.5 * n_t * kLog2Pi);
    const ad::Var rt = t.sub(m, mu_t);
    const ad::Var numt = t.add(t.mul(rt, rt), g.v_t);
    const ad::Var ratio = t.mul(numt, t.powc(g.s_col, -1.0));
    const ad::Var support = t.scale_add(t.add(t.sum(t.log(g.s_col)), t.sum(ratio)), -0.5,
                                        -0.5 * n_t * kLog2Pi);

    ObjectiveVars out;
    out.datafit = datafit;
    out.kl = t.sub(support, logmarg);
    out.value = model.cfg.beta == 0.0 ? datafit
                                      : t.sub(datafit, t.scale_add(out.kl, model.cfg.beta));
    return out;
}

ObjectiveVars classification_objective_graph(ad::Tape& t, const GpVibModel& model,
                                             const Task& task, const DenseMatrix& noise) {
    if (task.kind != TaskKind::Classification)
        throw DimensionMismatch("classification objective needs a classification task");
    const int n_t = task.support_size();
    const int n_v = task.query_size();
    const int n_cls = task.n_classes;
    if (noise.cols != n_cls) throw DimensionMismatch("noise needs one column per class");
    if (n_v == 0 || noise.rows % n_v != 0)
        throw DimensionMismatch("noise rows must be a multiple of the query size");
    const int reps = noise.rows / n_v;

    ad::Var k_tt;
    CommonGraph g = common_graph(t, model, task, k_tt);
    const std::vector<int> order = canonical_class_order(task.labels_support, n_cls);

    DenseMatrix signs(n_t, n_cls);
    for (int j = 0; j < n_t; ++j)
        for (int cidx = 0; cidx < n_cls; ++cidx)
            signs.at(j, cidx) = task.labels_support[j] == order[cidx] ? 1.0 : -1.0;
    DenseMatrix onehot(noise.rows, n_cls);
    for (int row = 0; row < noise.rows; ++row)
        for (int cidx = 0; cidx < n_cls; ++cidx)
            onehot.at(row, cidx) = task.labels_query[row % n_v] == order[cidx] ? 1.0 : 0.0;

    const ad::Var m_mat = t.mul(g.mt, t.constant(signs));
    const ad::Var a_mat = t.tri_solve(g.l, m_mat);
    const ad::Var mu_t = t.matmul(g.w_t, a_mat, true, false);
    const ad::Var mu_v = t.matmul(g.w_v, a_mat, true, false);

    const ad::Var sd_v = t.powc(t.clamp(g.v_v, 1e-300, 1e300), 0.5);
    const ad::Var e = t.constant(reorder_cols(noise, order));
    const ad::Var f = t.add(t.repeat_rows(mu_v, reps), t.mul(t.repeat_rows(sd_v, reps), e));
    const ad::Var picked = t.sum(t.mul(f, t.constant(onehot)));
    const ad::Var lse = t.sum(t.logsumexp_rows(f));
    const ad::Var datafit = t.scale_add(t.sub(picked, lse), 1.0 / reps);

    const ad::Var quad = t.sum(t.mul(a_mat, a_mat));
    const ad::Var logmarg =
        t.scale_add(t.add(quad, t.scale_add(g.logdet, static_cast<double>(n_cls))), -0.5,
                    -0.5 * n_cls * n_t * kLog2Pi);
    const ad::Var rt = t.sub(m_mat, mu_t);
    const ad::Var numt = t.add(t.mul(rt, rt), g.v_t);
    const ad::Var ratio = t.mul(numt, t.powc(g.s_col, -1.0));
    const ad::Var support = t.scale_add(
        t.add(t.scale_add(t.sum(t.log(g.s_col)), static_cast<double>(n_cls)), t.sum(ratio)),
        -0.5, -0.5 * n_cls * n_t * kLog2Pi);

    ObjectiveVars out;
    out.datafit = datafit;
    out.kl = t.sub(support, logmarg);
    out.value = model.cfg.beta == 0.0 ? datafit
                                      : t.sub(datafit, t.scale_add(out.kl, model.cfg.beta));
    return out;
}

DenseMatrix classification_noise(int n_query, int n_classes, int mc_samples, Rng& rng) {
    DenseMatrix e(mc_samples * n_query, n_classes);
    for (auto& v : e.data) v = rng.normal();
    return e;
}

namespace {

ObjectiveVars objective_graph(ad::Tape& t, const GpVibModel& model, const Task& task, Rng& rng) {
    if (task.kind == TaskKind::Regression) return regression_objective_graph(t, model, task);
    const DenseMatrix e =
        classification_noise(task.query_size(), task.n_classes, model.cfg.mc_samples, rng);
    return classification_objective_graph(t, model, task, e);
}

}  // namespace

ObjectiveParts vib_objective(const GpVibModel& model, const Task& task, Rng& rng) {
    ad::Tape t;
    const ObjectiveVars g = objective_graph(t, model, task, rng);
    return {t.value(g.value), t.value(g.datafit), t.value(g.kl)};
}

std::vector<double> vib_gradient(const GpVibModel& model, const Task& task, Rng& rng,
                                 ObjectiveParts* parts) {
    ad::Tape t;
    const ObjectiveVars g = objective_graph(t, model, task, rng);
    if (parts) *parts = {t.value(g.value), t.value(g.datafit), t.value(g.kl)};
    return t.gradient(g.value, model.params);
}

// ---------------- posteriors and prediction ----------------

GaussianNd exact_posterior(const GpVibModel& model, const Task& task) {
    if (task.kind != TaskKind::Regression)
        throw DimensionMismatch("exact_posterior needs a regression task");
    const KernelSpec ker = live_kernel(model);
    const DenseMatrix phi =
        normalized_features(model.net.forward(task.x_support, model.params), ker);
    const double c = kernel_scale(ker, model.net.feature_dim());
    const double s2 = model.sigma2();
    const int n_t = task.support_size();

    const DenseMatrix k = scaled_cross(phi, phi, c);
    DenseMatrix ks = k;
    for (int i = 0; i < n_t; ++i) ks.at(i, i) += s2;
    const LowerTriangular l = cholesky(ks);
    const DenseMatrix a = solve_triangular(l, DenseMatrix::column(task.y_support), TriSide::Lower);
    const DenseMatrix w = solve_triangular(l, k, TriSide::Lower);

    GaussianNd g;
    const DenseMatrix mean = matmul(w, a, true, false);
    g.mean.assign(mean.data.begin(), mean.data.end());
    g.cov = sub(k, matmul(w, w, true, false));
    return g;
}

EncoderJoint amortized_encoder(const GpVibModel& model, const Task& task) {
    const EncoderSites sites = build_sites(model, task);
    const int n_t = task.support_size();
    const DenseMatrix k = scaled_cross(sites.phi_support, sites.phi_support, sites.out_scale);
    DenseMatrix ks = k;
    for (int i = 0; i < n_t; ++i) ks.at(i, i) += sites.s[i];
    const LowerTriangular l = cholesky(ks);
    const DenseMatrix a = solve_triangular(l, sites.m, TriSide::Lower);
    const DenseMatrix w = solve_triangular(l, k, TriSide::Lower);

    EncoderJoint out;
    out.mean = matmul(w, a, true, false);
    out.cov = sub(k, matmul(w, w, true, false));
    return out;
}

std::pair<double, double> marginal_q(const GpVibModel& model, const Task& task,
                                     const std::vector<double>& x) {
    if (task.kind != TaskKind::Regression)
        throw DimensionMismatch("marginal_q supports regression tasks");
    if (static_cast<int>(x.size()) != task.input_dim())
        throw DimensionMismatch("marginal_q: input width mismatch");
    const EncoderSites sites = build_sites(model, task);
    const KernelSpec ker = live_kernel(model);
    const DenseMatrix xs(1, static_cast<int>(x.size()), x);
    const DenseMatrix phi = normalized_features(model.net.forward(xs, model.params), ker);
    const MarginalStats st = stats_direct(sites, phi);
    return {st.mu_q.at(0, 0), st.v_q[0]};
}

std::vector<RegressionPrediction> predict_regression(const GpVibModel& model, const Task& task,
                                                     const DenseMatrix& x_star, SolvePath path) {
    if (task.kind != TaskKind::Regression)
        throw DimensionMismatch("predict_regression needs a regression task");
    const EncoderSites sites = build_sites(model, task);
    const KernelSpec ker = live_kernel(model);
    const DenseMatrix phi = normalized_features(model.net.forward(x_star, model.params), ker);
    const MarginalStats st = stats_for(path, sites, phi);

    std::vector<RegressionPrediction> out(x_star.rows);
    for (int j = 0; j < x_star.rows; ++j) {
        out[j].mean = st.mu_q.at(j, 0);
        out[j].var_f = st.v_q[j];
        out[j].var_y = st.v_q[j] + sites.sigma2;
    }
    return out;
}

std::vector<ClassPrediction> predict_classification_with_noise(const GpVibModel& model,
                                                               const Task& task,
                                                               const DenseMatrix& x_star,
                                                               const DenseMatrix& noise,
                                                               SolvePath path) {
    if (task.kind != TaskKind::Classification)
        throw DimensionMismatch("predict_classification needs a classification task");
    const int n_cls = task.n_classes;
    if (noise.cols != n_cls) throw DimensionMismatch("noise needs one column per class");
    if (x_star.rows == 0) return {};
    if (noise.rows % x_star.rows != 0)
        throw DimensionMismatch("noise rows must be a multiple of the prediction count");
    const int reps = noise.rows / x_star.rows;

    const EncoderSites sites = build_sites(model, task);
    const KernelSpec ker = live_kernel(model);
    const DenseMatrix phi = normalized_features(model.net.forward(x_star, model.params), ker);
    const MarginalStats st = stats_for(path, sites, phi);
    const std::vector<int> order = canonical_class_order(task.labels_support, n_cls);

    std::vector<ClassPrediction> out(x_star.rows);
    std::vector<double> f(n_cls), p_can(n_cls);
    for (int j = 0; j < x_star.rows; ++j) {
        ClassPrediction& pr = out[j];
        pr.means.assign(n_cls, 0.0);
        for (int n = 0; n < n_cls; ++n) pr.means[n] = st.mu_q.at(j, n);
        pr.var_f = st.v_q[j];
        const double sd = std::sqrt(std::max(st.v_q[j], 0.0));

        std::fill(p_can.begin(), p_can.end(), 0.0);
        for (int rdraw = 0; rdraw < reps; ++rdraw) {
            const int row = rdraw * x_star.rows + j;
            for (int cidx = 0; cidx < n_cls; ++cidx)
                f[cidx] = pr.means[order[cidx]] + sd * noise.at(row, order[cidx]);
            double mx = f[0];
            for (int cidx = 1; cidx < n_cls; ++cidx) mx = std::max(mx, f[cidx]);
            double se = 0.0;
            for (int cidx = 0; cidx < n_cls; ++cidx) se += std::exp(f[cidx] - mx);
            for (int cidx = 0; cidx < n_cls; ++cidx) p_can[cidx] += std::exp(f[cidx] - mx) / se;
        }
        pr.probs.assign(n_cls, 0.0);
        for (int cidx = 0; cidx < n_cls; ++cidx) pr.probs[order[cidx]] = p_can[cidx] / reps;

        int best = 0;
        for (int n = 1; n < n_cls; ++n)
            if (pr.means[n] > pr.means[best]) best = n;
        pr.label = best;
    }
    return out;
}

std::vector<ClassPrediction> predict_classification(const GpVibModel& model, const Task& task,
                                                    const DenseMatrix& x_star, Rng& rng,
                                                    SolvePath path) {
    const int reps = std::max(1, model.cfg.mc_samples);
    const DenseMatrix noise = classification_noise(x_star.rows, task.n_classes, reps, rng);
    return predict_classification_with_noise(model, task, x_star, noise, path);
}

// ---------------- streaming ----------------

namespace {

void stream_accumulate(StreamState& st, const double* phi, const std::vector<double>& m,
                       double s) {
    const int m_dim = st.a_mat.rows;
    const double inv_s = 1.0 / s;
    const auto& kr = simd::active();
    for (int r = 0; r < m_dim; ++r) kr.axpy(phi[r] * inv_s, phi, st.a_mat.row(r), m_dim);
    for (size_t n = 0; n < m.size(); ++n)
        for (int r = 0; r < m_dim; ++r) st.b.at(r, static_cast<int>(n)) += phi[r] * m[n] * inv_s;
    st.count += 1;
}

DenseMatrix stream_features(const GpVibModel& model, const std::vector<double>& x) {
    if (static_cast<int>(x.size()) != model.net.input_dim)
        throw DimensionMismatch("stream point width mismatch");
    const DenseMatrix xs(1, static_cast<int>(x.size()), x);
    return model.net.forward(xs, model.params);
}

}  // namespace

StreamState stream_begin(const GpVibModel& model) {
    if (model.cfg.kernel.type != KernelSpec::Type::Linear)
        throw StreamingUnsupported("streaming prediction requires the linear kernel");
    StreamState st;
    const int m_dim = model.net.feature_dim();
    st.a_mat = DenseMatrix(m_dim, m_dim);
    st.b = DenseMatrix(m_dim, std::max(1, model.n_classes));
    return st;
}

void stream_ingest_regression(StreamState& st, const GpVibModel& model,
                              const std::vector<double>& x, double y) {
    const DenseMatrix phi = stream_features(model, x);
    double m, s;
    if (model.cfg.encoder == EncoderKind::ExactPosterior) {
        m = y;
        s = model.sigma2();
    } else {
        m = y * model.heads.m_tilde(phi, model.params)[0];
        s = model.heads.s_of(phi, model.params)[0];
    }
    stream_accumulate(st, phi.row(0), {m}, s);
}

void stream_ingest_classification(StreamState& st, const GpVibModel& model,
                                  const std::vector<double>& x, int label) {
    if (label < 0 || label >= st.b.cols) throw DimensionMismatch("stream label out of range");
    const DenseMatrix phi = stream_features(model, x);
    const double mt = model.heads.m_tilde(phi, model.params)[0];
    const double s = model.heads.s_of(phi, model.params)[0];
    std::vector<double> m(st.b.cols);
    for (int n = 0; n < st.b.cols; ++n) m[n] = n == label ? mt : -mt;
    stream_accumulate(st, phi.row(0), m, s);
}

StreamPrediction stream_predict(const StreamState& st, const GpVibModel& model,
                                const std::vector<double>& x) {
    const KernelSpec ker = live_kernel(model);
    const double c = kernel_scale(ker, model.net.feature_dim());
    const DenseMatrix phi = stream_features(model, x);
    const int m_dim = st.a_mat.rows;

    DenseMatrix bmat = st.a_mat;
    for (int d = 0; d < m_dim; ++d) bmat.at(d, d) += 1.0 / c;
    const LowerTriangular l = cholesky(bmat);
    const DenseMatrix phicol(m_dim, 1, std::vector<double>(phi.row(0), phi.row(0) + m_dim));
    const DenseMatrix z = solve_triangular(l, phicol, TriSide::Lower);
    const DenseMatrix zb = solve_triangular(l, st.b, TriSide::Lower);

    StreamPrediction out;
    out.var_f = simd::active().dot(z.data.data(), z.data.data(), static_cast<size_t>(m_dim));
    out.var_y = out.var_f + model.sigma2();
    out.mean.assign(st.b.cols, 0.0);
    for (int n = 0; n < st.b.cols; ++n) {
        double acc = 0.0;
        for (int d = 0; d < m_dim; ++d) acc += z.at(d, 0) * zb.at(d, n);
        out.mean[n] = acc;
    }
    return out;
}

// ---------------- bound check ----------------

ElboBound elbo_bound_check(const GpVibModel& model, const Task& task) {
    if (task.kind != TaskKind::Regression)
        throw DimensionMismatch("elbo_bound_check needs a regression task");
    ElboBound out;
    if (task.query_size() == 0) return out;

    const EncoderSites sites = build_sites(model, task);
    out.vib_value = objective_plain(sites, task, 1.0, SolvePath::Direct).value;

    DenseMatrix k_vv = scaled_cross(sites.phi_query, sites.phi_query, sites.out_scale);
    for (int i = 0; i < k_vv.rows; ++i) k_vv.at(i, i) += sites.sigma2;
    GaussianNd g;
    g.mean.assign(task.query_size(), 0.0);
    g.cov = std::move(k_vv);
    out.log_marginal = mvn_logpdf(task.y_query, g);
    return out;
}

}  // namespace ibmeta
