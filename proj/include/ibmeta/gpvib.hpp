#pragma once

#include <utility>
#include <vector>

#include "ibmeta/autodiff.hpp"
#include "ibmeta/features.hpp"
#include "ibmeta/kernels.hpp"
#include "ibmeta/linalg.hpp"
#include "ibmeta/rng.hpp"
#include "ibmeta/tasks.hpp"

namespace ibmeta {

// exp(lik.log_noise) is clamped to this range before use
constexpr double kNoiseLo = 1e-5;
constexpr double kNoiseHi = 1e9;

struct VibConfig {
    double beta = 1.0;
    int mc_samples = 200;  // classification likelihood term and predictions
    KernelSpec kernel;
    EncoderKind encoder = EncoderKind::ExactPosterior;
    double log_noise_init = -4.605170185988091;  // log 0.01
};

// Feature net + encoder heads + kernel/likelihood parameters, trained
// end to end. n_classes = 0 means regression.
struct GpVibModel {
    FeatureNet net;
    EncoderHeads heads;
    VibConfig cfg;
    int n_classes = 0;
    ad::ParamSet params;

    bool is_regression() const { return n_classes == 0; }
    // clamped exp(lik.log_noise); 0 when the model has no noise parameter
    double sigma2() const;
};

GpVibModel make_gpvib_model(const VibConfig& cfg, int input_dim, const std::vector<int>& hidden,
                            Activation act, int n_classes, Rng& rng, bool augment_bias = true);

// ---------------- objectives ----------------

struct ObjectiveVars {
    ad::Var value;    // maximized training objective
    ad::Var datafit;  // expected (or MC) query log-likelihood
    ad::Var kl;       // KL[q(f_support) || p(f_support | X)], summed over classes
};

struct ObjectiveParts {
    double value = 0.0;
    double datafit = 0.0;
    double kl = 0.0;
};

ObjectiveVars regression_objective_graph(ad::Tape& tape, const GpVibModel& model,
                                         const Task& task);

// noise holds the reparameterization draws: (mc_samples * n_query) x n_classes,
// recorded as a constant so the sampled estimator differentiates exactly.
ObjectiveVars classification_objective_graph(ad::Tape& tape, const GpVibModel& model,
                                             const Task& task, const DenseMatrix& noise);
DenseMatrix classification_noise(int n_query, int n_classes, int mc_samples, Rng& rng);

// Build the tape for the task's kind, evaluate, and (for the gradient entry
// point) run backward. rng is consumed only by classification MC draws.
ObjectiveParts vib_objective(const GpVibModel& model, const Task& task, Rng& rng);
std::vector<double> vib_gradient(const GpVibModel& model, const Task& task, Rng& rng,
                                 ObjectiveParts* parts = nullptr);

// ---------------- plain evaluation paths ----------------

// How linear solves against K + S are carried out: Direct factorizes the
// n x n Gram matrix; Woodbury factorizes the M x M feature-space normal
// equations. Both produce the same values to solver precision.
enum class SolvePath { Direct, Woodbury };

// Per-point encoder sites and features, everything the objective needs
// once the nets have run. phi_* rows are already cosine-normalized when
// the kernel asks for it, so K = out_scale * phi phi^T throughout.
struct EncoderSites {
    DenseMatrix phi_support;  // n_t x M
    DenseMatrix phi_query;    // n_v x M
    DenseMatrix m;            // n_t x C site means (C = 1 for regression)
    std::vector<double> s;    // n_t site variances
    double out_scale = 1.0;
    double sigma2 = 0.0;      // regression likelihood variance
};

EncoderSites build_sites(const GpVibModel& model, const Task& task);

// Tape-free objective evaluation; classification requires noise.
ObjectiveParts objective_plain(const EncoderSites& sites, const Task& task, double beta,
                               SolvePath path, const DenseMatrix* noise = nullptr);

// Same value assembled the definitional way: expected query log-likelihood
// minus beta * kl_gaussian(joint encoder posterior, GP prior).
double regression_objective_explicit_kl(const EncoderSites& sites,
                                        const std::vector<double>& y_query, double beta);

// ---------------- posteriors and prediction ----------------

// Gaussian-likelihood posterior over support function values:
// mean K(K+sigma^2 I)^{-1} Y, cov K - K(K+sigma^2 I)^{-1} K.
GaussianNd exact_posterior(const GpVibModel& model, const Task& task);

// Encoder posterior with sites (m, S): per-class means share one covariance.
struct EncoderJoint {
    DenseMatrix mean;  // n_t x C
    DenseMatrix cov;   // n_t x n_t
};
EncoderJoint amortized_encoder(const GpVibModel& model, const Task& task);

// Univariate marginal q(f(x)) for a regression task (f-variance, no noise).
std::pair<double, double> marginal_q(const GpVibModel& model, const Task& task,
                                     const std::vector<double>& x);

struct RegressionPrediction {
    double mean = 0.0;
    double var_f = 0.0;  // marginal variance of f(x)
    double var_y = 0.0;  // var_f + sigma^2
};
std::vector<RegressionPrediction> predict_regression(const GpVibModel& model, const Task& task,
                                                     const DenseMatrix& x_star,
                                                     SolvePath path = SolvePath::Direct);

struct ClassPrediction {
    std::vector<double> probs;  // MC-averaged softmax
    std::vector<double> means;  // per-class marginal means
    double var_f = 0.0;         // shared marginal variance
    int label = 0;              // argmax of means, ties to the lowest index
};
std::vector<ClassPrediction> predict_classification(const GpVibModel& model, const Task& task,
                                                    const DenseMatrix& x_star, Rng& rng,
                                                    SolvePath path = SolvePath::Direct);

// Same, with caller-supplied noise draws (rows = draws * x_star.rows, one
// column per class, indexed by original class id). Lets tests pin the MC
// sample when checking invariances.
std::vector<ClassPrediction> predict_classification_with_noise(const GpVibModel& model,
                                                               const Task& task,
                                                               const DenseMatrix& x_star,
                                                               const DenseMatrix& noise,
                                                               SolvePath path = SolvePath::Direct);

// ---------------- streaming prediction ----------------

// Sufficient statistics for linear-kernel prediction at fixed parameters:
// a = sum phi phi^T / s, b_n = sum phi m_n / s over ingested points.
// Memory stays O(M^2 + M*C) however many points arrive.
struct StreamState {
    DenseMatrix a_mat;  // M x M
    DenseMatrix b;      // M x C
    int count = 0;
};

StreamState stream_begin(const GpVibModel& model);  // throws StreamingUnsupported for cosine
void stream_ingest_regression(StreamState& st, const GpVibModel& model,
                              const std::vector<double>& x, double y);
void stream_ingest_classification(StreamState& st, const GpVibModel& model,
                                  const std::vector<double>& x, int label);

struct StreamPrediction {
    std::vector<double> mean;  // one per class (size 1 for regression)
    double var_f = 0.0;
    double var_y = 0.0;  // var_f + sigma^2 (regression)
};
StreamPrediction stream_predict(const StreamState& st, const GpVibModel& model,
                                const std::vector<double>& x);

// ---------------- bound check ----------------

// At beta = 1 the objective lower-bounds the closed-form Gaussian log
// marginal likelihood of the query outputs; returns both sides.
// An empty query set bounds nothing and both sides are zero.
struct ElboBound {
    double vib_value = 0.0;
    double log_marginal = 0.0;
};
ElboBound elbo_bound_check(const GpVibModel& model, const Task& task);

}  // namespace ibmeta
