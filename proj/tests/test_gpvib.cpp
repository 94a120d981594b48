#include "doctest.h"

#include "helpers.hpp"
#include "ibmeta/gpvib.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace ibmeta;

namespace {

// Feature map [x, 1] on scalar inputs: with fixed variance 1/2 the kernel is
// (x x' + 1)/2, so a support point at x=1 has k(x,x)=1. The workhorse for
// every hand-computed example below.
GpVibModel unit_kernel_model(double log_noise, EncoderKind enc = EncoderKind::ExactPosterior) {
    VibConfig cfg;
    cfg.kernel.fixed_variance = 0.5;
    cfg.log_noise_init = log_noise;
    cfg.encoder = enc;
    Rng rng(1);
    return make_gpvib_model(cfg, 1, {}, Activation::Relu, 0, rng);
}

Task one_point_task(double x, double y, double xq, double yq) {
    Task t;
    t.x_support = DenseMatrix(1, 1, {x});
    t.y_support = {y};
    t.x_query = DenseMatrix(1, 1, {xq});
    t.y_query = {yq};
    return t;
}

Task sinusoid_task(uint64_t seed, int shots = 5, int query = 4) {
    SinusoidSpec s;
    s.shots = shots;
    s.query = query;
    return sample_task(TaskGenSpec{s}, seed);
}

GpVibModel random_reg_model(uint64_t seed, EncoderKind enc, std::vector<int> hidden = {6},
                            KernelSpec::Type type = KernelSpec::Type::Linear) {
    VibConfig cfg;
    cfg.encoder = enc;
    cfg.kernel.type = type;
    Rng rng(seed);
    return make_gpvib_model(cfg, 1, hidden, Activation::Tanh, 0, rng);
}

GpVibModel random_cls_model(uint64_t seed, int n_classes, int input_dim,
                            EncoderKind enc = EncoderKind::Simplified,
                            KernelSpec::Type type = KernelSpec::Type::Linear) {
    VibConfig cfg;
    cfg.encoder = enc;
    cfg.kernel.type = type;
    Rng rng(seed);
    return make_gpvib_model(cfg, input_dim, {8}, Activation::Tanh, n_classes, rng);
}

Task small_cls_task(uint64_t seed, int ways = 3, int shots = 2, int qpc = 2, int dim = 2) {
    SyntheticClassesSpec s;
    s.ways = ways;
    s.shots = shots;
    s.query_per_class = qpc;
    s.dim = dim;
    return sample_task(TaskGenSpec{s}, seed);
}

// hand-built kernel matrix c * Phi Phi^T from explicit features
DenseMatrix hand_gram(const DenseMatrix& phi, double c) {
    DenseMatrix k(phi.rows, phi.rows);
    for (int i = 0; i < phi.rows; ++i)
        for (int j = 0; j < phi.rows; ++j) {
            double acc = 0.0;
            for (int d = 0; d < phi.cols; ++d) acc += phi.at(i, d) * phi.at(j, d);
            k.at(i, j) = c * acc;
        }
    return k;
}

double sample_std(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / (v.size() - 1));
}

constexpr double kLog2Pi = 1.8378770664093453;

}  // namespace

TEST_CASE("one observation of 2 through a unit kernel splits the difference") {
    GpVibModel model = unit_kernel_model(0.0);  // sigma^2 = 1
    Task t = one_point_task(1.0, 2.0, 1.0, 0.0);
    GaussianNd post = exact_posterior(model, t);
    REQUIRE(post.mean.size() == 1);
    CHECK(post.mean[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(post.cov.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("huge observation noise recovers the prior") {
    GpVibModel model = unit_kernel_model(std::log(1e8));
    Task t;
    t.x_support = DenseMatrix(3, 1, {0.5, -1.0, 2.0});
    t.y_support = {1.0, -2.0, 0.5};
    t.x_query = DenseMatrix(1, 1, {0.0});
    t.y_query = {0.0};

    GaussianNd post = exact_posterior(model, t);
    DenseMatrix phi(3, 2);
    for (int i = 0; i < 3; ++i) {
        phi.at(i, 0) = t.x_support.at(i, 0);
        phi.at(i, 1) = 1.0;
    }
    DenseMatrix k = hand_gram(phi, 0.5);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::fabs(post.mean[i]) < 1e-6);
        for (int j = 0; j < 3; ++j) CHECK(post.cov.at(i, j) == doctest::Approx(k.at(i, j)).epsilon(1e-6));
    }
}

TEST_CASE("exact posterior matches a direct-inverse evaluation of the closed form") {
    GpVibModel model = random_reg_model(7, EncoderKind::ExactPosterior);
    Task t = sinusoid_task(3, 5, 3);
    GaussianNd post = exact_posterior(model, t);

    // independent evaluation: K from explicit features, Gauss-Jordan inverse
    DenseMatrix phi = model.net.forward(t.x_support, model.params);
    const double c = std::exp(model.params.entry("kernel.v").value[0]) / model.net.feature_dim();
    DenseMatrix k = hand_gram(phi, c);
    DenseMatrix ks = k;
    const double s2 = model.sigma2();
    for (int i = 0; i < 5; ++i) ks.at(i, i) += s2;
    DenseMatrix inv = testutil::gauss_jordan_inverse(ks);
    std::vector<double> mean = testutil::mat_vec(k, testutil::mat_vec(inv, t.y_support));
    DenseMatrix cov = sub(k, matmul(matmul(k, inv), k));

    for (int i = 0; i < 5; ++i) {
        CHECK(testutil::rel_err(post.mean[i], mean[i]) < 1e-8);
        for (int j = 0; j < 5; ++j)
            CHECK(std::fabs(post.cov.at(i, j) - cov.at(i, j)) < 1e-8);
    }
}

TEST_CASE("amortized encoder with sites m=Y, S=noise reduces to the exact posterior") {
    GpVibModel model = unit_kernel_model(0.0, EncoderKind::Amortized);
    // m_tilde == 1 makes the site mean y * m_tilde = y; s == softplus^{-1} trick gives s = 1
    model.params.entry("enc.m_w").value = {0.0, 0.0};
    model.params.entry("enc.m_b").value = {1.0};
    model.params.entry("enc.s_w").value = {0.0, 0.0};
    model.params.entry("enc.s_b").value = {std::log(std::expm1(1.0))};

    Task t;
    t.x_support = DenseMatrix(4, 1, {0.3, -0.8, 1.4, 2.2});
    t.y_support = {1.0, -0.5, 2.0, 0.7};
    t.x_query = DenseMatrix(1, 1, {0.0});
    t.y_query = {0.0};

    EncoderJoint q = amortized_encoder(model, t);
    GaussianNd exact = exact_posterior(model, t);
    for (int i = 0; i < 4; ++i) {
        CHECK(std::fabs(q.mean.at(i, 0) - exact.mean[i]) < 1e-10);
        for (int j = 0; j < 4; ++j) CHECK(std::fabs(q.cov.at(i, j) - exact.cov.at(i, j)) < 1e-10);
    }
}

TEST_CASE("zero site means give a centered encoder with the exact-posterior covariance") {
    GpVibModel model = unit_kernel_model(0.0, EncoderKind::Amortized);
    model.params.entry("enc.m_w").value = {0.0, 0.0};
    model.params.entry("enc.m_b").value = {0.0};
    model.params.entry("enc.s_w").value = {0.0, 0.0};
    model.params.entry("enc.s_b").value = {std::log(std::expm1(1.0))};

    Task t;
    t.x_support = DenseMatrix(3, 1, {0.5, -1.0, 2.0});
    t.y_support = {1.0, -2.0, 0.5};
    t.x_query = DenseMatrix(1, 1, {0.0});
    t.y_query = {0.0};

    EncoderJoint q = amortized_encoder(model, t);
    GaussianNd exact = exact_posterior(model, t);
    for (int i = 0; i < 3; ++i) {
        CHECK(q.mean.at(i, 0) == 0.0);
        for (int j = 0; j < 3; ++j) CHECK(std::fabs(q.cov.at(i, j) - exact.cov.at(i, j)) < 1e-10);
    }
}

TEST_CASE("binary encoder covariance does not depend on the label pattern") {
    GpVibModel model = random_cls_model(9, 2, 2);
    Task t = small_cls_task(5, 2, 3, 2);
    Task flipped = t;
    for (int& l : flipped.labels_support) l = 1 - l;
    for (int& l : flipped.labels_query) l = 1 - l;

    EncoderJoint a = amortized_encoder(model, t);
    EncoderJoint b = amortized_encoder(model, flipped);
    CHECK(a.cov.data == b.cov.data);  // sites S carry no label information
    for (int j = 0; j < a.mean.rows; ++j) {
        CHECK(a.mean.at(j, 0) == b.mean.at(j, 1));
        CHECK(a.mean.at(j, 1) == b.mean.at(j, 0));
    }
}

TEST_CASE("pointwise marginals at support inputs equal the joint marginals") {
    for (EncoderKind enc : {EncoderKind::ExactPosterior, EncoderKind::Amortized, EncoderKind::Simplified}) {
        GpVibModel model = random_reg_model(11 + static_cast<int>(enc), enc);
        Task t = sinusoid_task(21, 6, 2);
        EncoderJoint joint = amortized_encoder(model, t);
        for (int j = 0; j < t.support_size(); ++j) {
            std::vector<double> xj = {t.x_support.at(j, 0)};
            auto [mean, var] = marginal_q(model, t, xj);
            CHECK(std::fabs(mean - joint.mean.at(j, 0)) < 1e-10);
            CHECK(std::fabs(var - joint.cov.at(j, j)) < 1e-10);
        }
    }
}

TEST_CASE("single-support marginal at the observed input matches the one-point posterior") {
    GpVibModel model = unit_kernel_model(0.0);
    Task t = one_point_task(1.0, 2.0, 1.0, 0.0);
    auto [mean, var] = marginal_q(model, t, {1.0});
    CHECK(mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("marginal with features orthogonal to the support reverts to the prior") {
    VibConfig cfg;
    cfg.kernel.fixed_variance = 0.5;
    cfg.log_noise_init = 0.0;
    Rng rng(1);
    GpVibModel model = make_gpvib_model(cfg, 2, {}, Activation::Relu, 0, rng, false);

    Task t;
    t.x_support = DenseMatrix(1, 2, {1.0, 0.0});
    t.y_support = {3.0};
    t.x_query = DenseMatrix(1, 2, {0.0, 1.0});
    t.y_query = {0.0};
    auto [mean, var] = marginal_q(model, t, {0.0, 1.0});
    CHECK(mean == 0.0);
    CHECK(var == doctest::Approx(0.5).epsilon(1e-12));  // k(x,x) = 0.5 * (0+1)
}

TEST_CASE("at beta zero the objective is exactly the expected query log-likelihood") {
    GpVibModel model = random_reg_model(13, EncoderKind::Simplified);
    model.cfg.beta = 0.0;
    Task t = sinusoid_task(31);
    Rng rng(0);
    ObjectiveParts parts = vib_objective(model, t, rng);
    CHECK(parts.value == parts.datafit);

    // expected log-likelihood assembled from the per-point marginals
    const double s2 = model.sigma2();
    double fit = 0.0;
    for (int j = 0; j < t.query_size(); ++j) {
        auto [mu, v] = marginal_q(model, t, {t.x_query.at(j, 0)});
        const double r = t.y_query[j] - mu;
        fit += -0.5 * (kLog2Pi + std::log(s2)) - (r * r + v) / (2.0 * s2);
    }
    CHECK(parts.value == doctest::Approx(fit).epsilon(1e-10));
}

TEST_CASE("two-point instance matches the hand-evaluated closed form") {
    // phi(x) = x, fixed variance 1, support (1, 2), query (1, 1), sigma^2 = 1:
    // datafit = -log(2pi)/2 - 1/4, site term = +log(2pi)/2 + 3/4,
    // prior term = -log(2pi)/2 - log(2)/2 - 1.
    VibConfig cfg;
    cfg.kernel.fixed_variance = 1.0;
    cfg.log_noise_init = 0.0;
    Rng rng(1);
    GpVibModel model = make_gpvib_model(cfg, 1, {}, Activation::Relu, 0, rng, false);
    Task t = one_point_task(1.0, 2.0, 1.0, 1.0);

    Rng unused(0);
    ObjectiveParts parts = vib_objective(model, t, unused);
    const double expected = -0.5 * kLog2Pi - 0.5 - 0.5 * std::log(2.0);
    CHECK(parts.value == doctest::Approx(expected).epsilon(1e-12));
    CHECK(parts.datafit == doctest::Approx(-0.5 * kLog2Pi - 0.25).epsilon(1e-12));
    // complexity equals the analytic KL of N(1, 1/2) against N(0, 1)
    CHECK(parts.kl == doctest::Approx(0.5 * (0.5 + 1.0 - 1.0 + std::log(2.0))).epsilon(1e-12));
}

TEST_CASE("convenient objective form equals the explicit KL form") {
    // The explicit form factors the raw support gram, so the shift penalty it
    // assembles is only well posed when that gram is comfortably nonsingular;
    // draw tasks until the instance satisfies the oracle's own precondition.
    int checked = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        for (EncoderKind enc :
             {EncoderKind::ExactPosterior, EncoderKind::Amortized, EncoderKind::Simplified}) {
            GpVibModel model = random_reg_model(100 + seed, enc);
            model.cfg.beta = 0.5 + 0.1 * static_cast<double>(seed % 3);
            Task t;
            EncoderSites sites;
            int attempt = 0;
            for (; attempt < 64; ++attempt) {
                t = sinusoid_task(200 + seed + 1000 * static_cast<uint64_t>(attempt),
                                  4 + static_cast<int>(seed % 3), 3);
                sites = build_sites(model, t);
                if (testutil::gram_cond_proxy(sites.phi_support) < 1e6) break;
            }
            REQUIRE(attempt < 64);
            ObjectiveParts parts = objective_plain(sites, t, model.cfg.beta, SolvePath::Direct);
            double explicit_form = regression_objective_explicit_kl(sites, t.y_query, model.cfg.beta);
            CHECK(testutil::rel_err(parts.value, explicit_form) < 1e-8);
            ++checked;
        }
    }
    CHECK(checked == 30);
}

TEST_CASE("feature-space and direct solves agree on objectives and predictions") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        const auto type = seed % 2 == 0 ? KernelSpec::Type::Linear : KernelSpec::Type::Cosine;

        GpVibModel reg = random_reg_model(300 + seed, EncoderKind::Simplified, {6}, type);
        Task t = sinusoid_task(400 + seed, 3 + static_cast<int>(seed % 4), 3);
        EncoderSites sites = build_sites(reg, t);
        ObjectiveParts d = objective_plain(sites, t, 1.0, SolvePath::Direct);
        ObjectiveParts w = objective_plain(sites, t, 1.0, SolvePath::Woodbury);
        CHECK(testutil::rel_err(d.value, w.value) < 1e-8);
        CHECK(testutil::rel_err(d.datafit, w.datafit) < 1e-8);
        CHECK(testutil::rel_err(d.kl, w.kl) < 1e-8);

        auto pd = predict_regression(reg, t, t.x_query, SolvePath::Direct);
        auto pw = predict_regression(reg, t, t.x_query, SolvePath::Woodbury);
        for (size_t j = 0; j < pd.size(); ++j) {
            CHECK(testutil::rel_err(pd[j].mean, pw[j].mean) < 1e-8);
            CHECK(std::fabs(pd[j].var_f - pw[j].var_f) < 1e-8);
        }

        GpVibModel cls = random_cls_model(500 + seed, 3, 2, EncoderKind::Simplified, type);
        Task ct = small_cls_task(600 + seed);
        EncoderSites csites = build_sites(cls, ct);
        Rng onoise_rng(700 + seed);
        DenseMatrix noise = classification_noise(ct.query_size(), 3, 16, onoise_rng);
        ObjectiveParts cd = objective_plain(csites, ct, 1.0, SolvePath::Direct, &noise);
        ObjectiveParts cw = objective_plain(csites, ct, 1.0, SolvePath::Woodbury, &noise);
        CHECK(testutil::rel_err(cd.value, cw.value) < 1e-8);

        Rng pnoise_rng(800 + seed);
        DenseMatrix pnoise = classification_noise(ct.query_size(), 3, 32, pnoise_rng);
        auto cpd = predict_classification_with_noise(cls, ct, ct.x_query, pnoise, SolvePath::Direct);
        auto cpw = predict_classification_with_noise(cls, ct, ct.x_query, pnoise, SolvePath::Woodbury);
        for (size_t j = 0; j < cpd.size(); ++j) {
            CHECK(cpd[j].label == cpw[j].label);
            for (int n = 0; n < 3; ++n) {
                CHECK(std::fabs(cpd[j].probs[n] - cpw[j].probs[n]) < 1e-8);
                CHECK(testutil::rel_err(cpd[j].means[n], cpw[j].means[n]) < 1e-8);
            }
        }
    }
}

TEST_CASE("tape objectives agree with the plain evaluation") {
    GpVibModel reg = random_reg_model(17, EncoderKind::Amortized);
    reg.cfg.beta = 0.8;
    Task t = sinusoid_task(51);
    EncoderSites sites = build_sites(reg, t);
    ObjectiveParts plain = objective_plain(sites, t, reg.cfg.beta, SolvePath::Direct);
    ad::Tape tape;
    ObjectiveVars vars = regression_objective_graph(tape, reg, t);
    CHECK(tape.value(vars.value) == doctest::Approx(plain.value).epsilon(1e-10));
    CHECK(tape.value(vars.datafit) == doctest::Approx(plain.datafit).epsilon(1e-10));
    CHECK(tape.value(vars.kl) == doctest::Approx(plain.kl).epsilon(1e-10));

    GpVibModel cls = random_cls_model(19, 3, 2);
    cls.cfg.beta = 0.6;
    Task ct = small_cls_task(53);
    Rng cnoise_rng(3);
    DenseMatrix noise = classification_noise(ct.query_size(), 3, 24, cnoise_rng);
    EncoderSites csites = build_sites(cls, ct);
    ObjectiveParts cplain = objective_plain(csites, ct, cls.cfg.beta, SolvePath::Direct, &noise);
    ad::Tape ctape;
    ObjectiveVars cvars = classification_objective_graph(ctape, cls, ct, noise);
    CHECK(ctape.value(cvars.value) == doctest::Approx(cplain.value).epsilon(1e-10));
    CHECK(ctape.value(cvars.datafit) == doctest::Approx(cplain.datafit).epsilon(1e-10));
    CHECK(ctape.value(cvars.kl) == doctest::Approx(cplain.kl).epsilon(1e-10));
}

TEST_CASE("single-class softmax contributes exactly nothing") {
    GpVibModel model = random_cls_model(23, 1, 2);
    Task t;
    t.kind = TaskKind::Classification;
    t.n_classes = 1;
    t.x_support = DenseMatrix(2, 2, {0.1, 0.2, -0.4, 1.0});
    t.labels_support = {0, 0};
    t.x_query = DenseMatrix(2, 2, {0.6, -0.3, 0.0, 0.9});
    t.labels_query = {0, 0};

    EncoderSites sites = build_sites(model, t);
    Rng one_rng(5);
    DenseMatrix noise = classification_noise(2, 1, 8, one_rng);
    ObjectiveParts parts = objective_plain(sites, t, 1.0, SolvePath::Direct, &noise);
    CHECK(parts.datafit == 0.0);
}

TEST_CASE("equal class means with zero draws give a uniform softmax") {
    GpVibModel model = random_cls_model(29, 4, 2);
    model.params.entry("enc.m_tilde").value = {0.0};  // all site means collapse to zero
    Task t = small_cls_task(57, 4, 2, 3, 2);
    EncoderSites sites = build_sites(model, t);
    DenseMatrix zeros(8 * t.query_size(), 4);
    ObjectiveParts parts = objective_plain(sites, t, 0.0, SolvePath::Direct, &zeros);
    const double expected = t.query_size() * std::log(1.0 / 4.0);
    CHECK(parts.datafit == doctest::Approx(expected).epsilon(1e-14));
    CHECK(parts.value == parts.datafit);
}

TEST_CASE("objective and predictions are exactly invariant to relabeling classes") {
    GpVibModel model = random_cls_model(31, 3, 2);
    Task t = small_cls_task(59, 3, 2, 2, 2);
    const std::vector<int> perm = {2, 0, 1};

    Task pt = t;
    for (int& l : pt.labels_support) l = perm[l];
    for (int& l : pt.labels_query) l = perm[l];

    Rng perm_rng(7);
    DenseMatrix noise = classification_noise(t.query_size(), 3, 16, perm_rng);
    DenseMatrix pnoise(noise.rows, noise.cols);
    for (int r = 0; r < noise.rows; ++r)
        for (int c = 0; c < noise.cols; ++c) pnoise.at(r, perm[c]) = noise.at(r, c);

    EncoderSites s1 = build_sites(model, t);
    EncoderSites s2 = build_sites(model, pt);
    ObjectiveParts a = objective_plain(s1, t, 1.0, SolvePath::Direct, &noise);
    ObjectiveParts b = objective_plain(s2, pt, 1.0, SolvePath::Direct, &pnoise);
    CHECK(a.value == b.value);
    CHECK(a.datafit == b.datafit);
    CHECK(a.kl == b.kl);

    Rng qperm_rng(9);
    DenseMatrix qnoise = classification_noise(t.query_size(), 3, 32, qperm_rng);
    DenseMatrix qpnoise(qnoise.rows, qnoise.cols);
    for (int r = 0; r < qnoise.rows; ++r)
        for (int c = 0; c < qnoise.cols; ++c) qpnoise.at(r, perm[c]) = qnoise.at(r, c);
    auto pa = predict_classification_with_noise(model, t, t.x_query, qnoise);
    auto pb = predict_classification_with_noise(model, pt, pt.x_query, qpnoise);
    for (size_t j = 0; j < pa.size(); ++j) {
        CHECK(pb[j].label == perm[pa[j].label]);
        for (int n = 0; n < 3; ++n) {
            CHECK(pb[j].probs[perm[n]] == pa[j].probs[n]);
            CHECK(pb[j].means[perm[n]] == pa[j].means[n]);
        }
    }
}

TEST_CASE("prediction at the observed point carries the noise on top of the posterior") {
    GpVibModel model = unit_kernel_model(0.0);
    Task t = one_point_task(1.0, 2.0, 1.0, 0.0);
    auto preds = predict_regression(model, t, DenseMatrix(1, 1, {1.0}));
    REQUIRE(preds.size() == 1);
    CHECK(preds[0].mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(preds[0].var_f == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(preds[0].var_y == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("mirrored binary support gives an even split at the symmetric point") {
    VibConfig cfg;
    cfg.encoder = EncoderKind::Simplified;
    cfg.mc_samples = 200;
    Rng rng(1);
    GpVibModel model = make_gpvib_model(cfg, 2, {}, Activation::Relu, 2, rng, false);

    Task t;
    t.kind = TaskKind::Classification;
    t.n_classes = 2;
    t.x_support = DenseMatrix(2, 2, {1.0, 1.0, -1.0, 1.0});
    t.labels_support = {0, 1};
    t.x_query = DenseMatrix(1, 2, {0.0, 1.0});
    t.labels_query = {0};

    Rng mc(12345);
    auto preds = predict_classification(model, t, t.x_query, mc);
    REQUIRE(preds.size() == 1);
    CHECK(preds[0].probs[0] + preds[0].probs[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::fabs(preds[0].probs[0] - 0.5) < 3.0 / std::sqrt(200.0));
    CHECK(std::fabs(preds[0].means[0]) < 1e-12);
    CHECK(std::fabs(preds[0].means[1]) < 1e-12);
}

TEST_CASE("argmax of the means decides like the sampled probabilities when gaps are clear") {
    for (uint64_t seed = 0; seed < 2; ++seed) {
        const int ways = seed == 0 ? 2 : 5;
        GpVibModel model = random_cls_model(37 + seed, ways, 2);
        model.cfg.mc_samples = 100000;
        Task t = small_cls_task(61 + seed, ways, 2, 1, 2);
        Rng mc(97 + seed);
        auto preds = predict_classification(model, t, t.x_query, mc);
        const double s = 100000.0;
        for (const auto& p : preds) {
            std::vector<double> sorted = p.probs;
            std::sort(sorted.begin(), sorted.end(), std::greater<double>());
            const double se = std::sqrt(sorted[0] * (1.0 - sorted[0]) / s) +
                              std::sqrt(sorted[1] * (1.0 - sorted[1]) / s);
            if (sorted[0] - sorted[1] > 5.0 * se) {
                int prob_argmax = 0;
                for (int n = 1; n < ways; ++n)
                    if (p.probs[n] > p.probs[prob_argmax]) prob_argmax = n;
                CHECK(p.label == prob_argmax);
            }
        }
    }
}

TEST_CASE("an empty stream predicts the prior") {
    VibConfig cfg;
    cfg.kernel.fixed_variance = 1.0;
    cfg.log_noise_init = 0.0;
    Rng rng(1);
    GpVibModel model = make_gpvib_model(cfg, 1, {}, Activation::Relu, 0, rng, false);
    StreamState st = stream_begin(model);
    StreamPrediction p = stream_predict(st, model, {1.0});
    CHECK(p.mean[0] == 0.0);
    CHECK(p.var_f == doctest::Approx(1.0).epsilon(1e-12));  // k(1,1) = 1*1*1
    CHECK(p.var_y == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("one streamed unit-feature point reproduces the batch posterior") {
    VibConfig cfg;
    cfg.kernel.fixed_variance = 1.0;
    cfg.log_noise_init = 0.0;
    Rng rng(1);
    GpVibModel model = make_gpvib_model(cfg, 1, {}, Activation::Relu, 0, rng, false);
    StreamState st = stream_begin(model);
    stream_ingest_regression(st, model, {1.0}, 2.0);
    StreamPrediction p = stream_predict(st, model, {1.0});
    CHECK(p.mean[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.var_f == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.var_y == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("streaming matches batch prediction in any ingestion order") {
    for (EncoderKind enc : {EncoderKind::ExactPosterior, EncoderKind::Simplified}) {
        GpVibModel model = random_reg_model(41 + static_cast<int>(enc), enc);
        Task t = sinusoid_task(71, 6, 3);

        auto batch = predict_regression(model, t, t.x_query);
        std::vector<int> order = {0, 1, 2, 3, 4, 5};
        for (int pass = 0; pass < 3; ++pass) {
            StreamState st = stream_begin(model);
            for (int j : order)
                stream_ingest_regression(st, model, {t.x_support.at(j, 0)}, t.y_support[j]);
            for (int q = 0; q < t.query_size(); ++q) {
                StreamPrediction sp = stream_predict(st, model, {t.x_query.at(q, 0)});
                CHECK(testutil::rel_err(sp.mean[0], batch[q].mean) < 1e-8);
                CHECK(std::fabs(sp.var_f - batch[q].var_f) < 1e-8);
            }
            std::rotate(order.begin(), order.begin() + 2, order.end());
            std::swap(order[0], order[3]);
        }
    }

    GpVibModel cls = random_cls_model(43, 3, 2);
    Task ct = small_cls_task(73, 3, 2, 2, 2);
    DenseMatrix zeros(ct.query_size(), 3);
    auto batch = predict_classification_with_noise(cls, ct, ct.x_query, zeros);
    StreamState st = stream_begin(cls);
    for (int j = ct.support_size() - 1; j >= 0; --j) {
        std::vector<double> xj = {ct.x_support.at(j, 0), ct.x_support.at(j, 1)};
        stream_ingest_classification(st, cls, xj, ct.labels_support[j]);
    }
    for (int q = 0; q < ct.query_size(); ++q) {
        std::vector<double> xq = {ct.x_query.at(q, 0), ct.x_query.at(q, 1)};
        StreamPrediction sp = stream_predict(st, cls, xq);
        for (int n = 0; n < 3; ++n) CHECK(testutil::rel_err(sp.mean[n], batch[q].means[n]) < 1e-8);
        CHECK(std::fabs(sp.var_f - batch[q].var_f) < 1e-8);
    }
}

TEST_CASE("streaming rejects the cosine kernel") {
    GpVibModel model = random_reg_model(47, EncoderKind::Simplified, {6}, KernelSpec::Type::Cosine);
    CHECK_THROWS_AS(stream_begin(model), StreamingUnsupported);
}

TEST_CASE("an empty query set bounds nothing") {
    GpVibModel model = random_reg_model(53, EncoderKind::ExactPosterior);
    Task t = sinusoid_task(81, 4, 2);
    t.x_query = DenseMatrix(0, 1);
    t.y_query.clear();
    ElboBound b = elbo_bound_check(model, t);
    CHECK(b.vib_value == 0.0);
    CHECK(b.log_marginal == 0.0);
}

TEST_CASE("the unit-beta objective never exceeds the Gaussian log marginal") {
    int violations = 0;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        const EncoderKind enc = seed % 3 == 0   ? EncoderKind::ExactPosterior
                                : seed % 3 == 1 ? EncoderKind::Amortized
                                                : EncoderKind::Simplified;
        GpVibModel model = random_reg_model(900 + seed, enc);
        model.cfg.beta = 1.0;
        Task t = sinusoid_task(1000 + seed, 3 + static_cast<int>(seed % 5), 4);
        ElboBound b = elbo_bound_check(model, t);
        if (!(b.vib_value <= b.log_marginal + 1e-8)) ++violations;
    }
    CHECK(violations == 0);
}

TEST_CASE("the bound's marginal side equals the closed-form Gaussian density") {
    GpVibModel model = random_reg_model(59, EncoderKind::ExactPosterior);
    Task t = sinusoid_task(91, 4, 3);
    ElboBound b = elbo_bound_check(model, t);

    DenseMatrix phi = model.net.forward(t.x_query, model.params);
    const double c = std::exp(model.params.entry("kernel.v").value[0]) / model.net.feature_dim();
    DenseMatrix k = hand_gram(phi, c);
    for (int i = 0; i < k.rows; ++i) k.at(i, i) += model.sigma2();
    GaussianNd g;
    g.mean.assign(t.query_size(), 0.0);
    g.cov = k;
    CHECK(b.log_marginal == doctest::Approx(mvn_logpdf(t.y_query, g)).epsilon(1e-10));
}

TEST_CASE("doubling the sample count shrinks the objective noise like root two") {
    GpVibModel model = random_cls_model(61, 3, 2);
    model.cfg.beta = 1.0;
    Task t = small_cls_task(97, 3, 2, 3, 2);

    auto spread = [&](int mc) {
        model.cfg.mc_samples = mc;
        std::vector<double> vals(50);
        for (int i = 0; i < 50; ++i) {
            Rng rng(5000 + i);
            vals[i] = vib_objective(model, t, rng).value;
        }
        return sample_std(vals);
    };
    const double ratio = spread(64) / spread(32);
    const double target = 1.0 / std::sqrt(2.0);
    CHECK(ratio > target * 0.75);
    CHECK(ratio < target * 1.25);
}

TEST_CASE("regression objective gradient matches finite differences") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        const EncoderKind enc = seed % 3 == 0   ? EncoderKind::ExactPosterior
                                : seed % 3 == 1 ? EncoderKind::Amortized
                                                : EncoderKind::Simplified;
        GpVibModel model = random_reg_model(2000 + seed, enc);
        model.cfg.beta = 1.0;
        Task t = sinusoid_task(2100 + seed, 4, 3);

        Rng unused(0);
        std::vector<double> analytic = vib_gradient(model, t, unused);
        auto f = [&](ad::ParamSet& p) {
            GpVibModel m2 = model;
            m2.params = p;
            Rng r(0);
            return vib_objective(m2, t, r).value;
        };
        CHECK(ad::check_gradient(f, model.params, analytic) < 1e-4);
    }
}

TEST_CASE("classification objective gradient matches finite differences under frozen noise") {
    for (uint64_t seed = 0; seed < 2; ++seed) {
        GpVibModel model = random_cls_model(2200 + seed, 3, 2);
        model.cfg.beta = 0.5;
        Task t = small_cls_task(2300 + seed, 3, 2, 2, 2);
        Rng fd_rng(2400 + seed);
        DenseMatrix noise = classification_noise(t.query_size(), 3, 20, fd_rng);

        std::vector<double> analytic;
        {
            ad::Tape tape;
            ObjectiveVars vars = classification_objective_graph(tape, model, t, noise);
            analytic = tape.gradient(vars.value, model.params);
        }
        auto f = [&](ad::ParamSet& p) {
            GpVibModel m2 = model;
            m2.params = p;
            ad::Tape tape;
            ObjectiveVars vars = classification_objective_graph(tape, m2, t, noise);
            return tape.value(vars.value);
        };
        CHECK(ad::check_gradient(f, model.params, analytic) < 1e-4);
    }
}
