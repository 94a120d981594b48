#pragma once

#include <string>
#include <vector>

#include "ibmeta/features.hpp"
#include "ibmeta/gpvib.hpp"
#include "ibmeta/tasks.hpp"

namespace ibmeta {

// Gradient-based adaptation baselines for sinusoid regression: plain MAML
// (a Dirac encoder over the adapted weights) and its stochastic variant,
// which puts a diagonal Gaussian around the adapted mean and penalizes the
// shift with a KL term.
struct MamlConfig {
    double inner_lr = 0.01;
    int inner_steps_train = 1;
    int inner_steps_test = 10;
    bool first_order = false;  // detach the inner gradient (debug aid)
    double beta = 1.0;         // stochastic variant only
    double s_init = 1e-4;      // initial per-parameter variance, stochastic variant
    int mc_samples = 1;        // stochastic variant's sample count
};

// A feature trunk with a linear output head. Likelihood is Gaussian with
// unit variance: log p(y|x, psi) = -1/2 (y - f(x))^2 - 1/2 log 2pi per
// point. The stochastic variant stores per-parameter log variances under
// "smaml.s.<base-name>"; log s = -inf encodes s = 0 exactly.
struct MamlModel {
    FeatureNet net;
    MamlConfig cfg;
    ad::ParamSet params;
    bool stochastic = false;

    // trunk weights plus the output head, in adaptation order
    std::vector<std::string> base_param_names() const;
};

MamlModel make_maml_model(const MamlConfig& cfg, int input_dim, const std::vector<int>& hidden,
                          Activation act, bool stochastic, Rng& rng);

// f(x) under the given parameter values (model.params or an adapted copy).
std::vector<double> maml_predict(const MamlModel& model, const ad::ParamSet& values,
                                 const DenseMatrix& x);

double maml_loglik(const MamlModel& model, const ad::ParamSet& values, const DenseMatrix& x,
                   const std::vector<double>& y);
double maml_mse(const MamlModel& model, const ad::ParamSet& values, const DenseMatrix& x,
                const std::vector<double>& y);

// steps full-batch gradient-ascent updates on the support log-likelihood,
// returned as a modified copy of model.params. steps = 0 returns the
// parameters unchanged.
ad::ParamSet inner_adapt(const MamlModel& model, const Task& task, double rho, int steps);

// Query log-likelihood at the adapted parameters. Gradients flow through
// the inner loop (exactly, unless cfg.first_order detaches it).
ObjectiveParts maml_objective(const MamlModel& model, const Task& task);
std::vector<double> maml_gradient(const MamlModel& model, const Task& task,
                                  ObjectiveParts* parts = nullptr);

// Standard-normal draws for the stochastic variant: one row per MC sample,
// one column per base parameter scalar (base_param_names order, entries
// flattened row-major).
DenseMatrix smaml_noise(const MamlModel& model, int mc_samples, Rng& rng);

// MC estimate of E[log p(query | theta + Delta + sqrt(s) eps)] minus
// beta * KL(N(theta + Delta, s) || N(theta, s)); the KL is exactly
// 1/2 sum Delta_j^2 / s_j. beta = 0 returns the data fit directly.
ObjectiveParts stochastic_maml_objective(const MamlModel& model, const Task& task, Rng& rng);
ObjectiveParts stochastic_maml_objective_with_noise(const MamlModel& model, const Task& task,
                                                    const DenseMatrix& eps);
std::vector<double> stochastic_maml_gradient(const MamlModel& model, const Task& task, Rng& rng,
                                             ObjectiveParts* parts = nullptr);
std::vector<double> stochastic_maml_gradient_with_noise(const MamlModel& model, const Task& task,
                                                        const DenseMatrix& eps,
                                                        ObjectiveParts* parts = nullptr);

}  // namespace ibmeta
