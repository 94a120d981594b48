#include "ibmeta/maml.hpp"

#include <cmath>
#include <string>

#include "ibmeta/simd.hpp"

namespace ibmeta {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void need_regression(const Task& task, const std::string& what) {
    if (task.kind != TaskKind::Regression)
        throw DimensionMismatch(what + " needs a regression task");
}

}  // namespace

std::vector<std::string> MamlModel::base_param_names() const {
    std::vector<std::string> names = net.param_names();
    names.push_back("maml.out_w");
    names.push_back("maml.out_b");
    return names;
}

MamlModel make_maml_model(const MamlConfig& cfg, int input_dim, const std::vector<int>& hidden,
                          Activation act, bool stochastic, Rng& rng) {
    MamlModel model;
    model.cfg = cfg;
    model.stochastic = stochastic;
    model.net.input_dim = input_dim;
    model.net.hidden = hidden;
    model.net.activation = act;
    model.net.augment_bias = false;  // the output head carries the bias
    model.net.init_params(model.params, rng);
    DenseMatrix w = glorot_uniform(model.net.feature_dim(), 1, rng);
    model.params.add("maml.out_w", model.net.feature_dim(), 1, std::move(w.data));
    model.params.add_scalar("maml.out_b", 0.0);
    if (stochastic) {
        const double log_s0 = std::log(cfg.s_init);
        for (const auto& name : model.base_param_names()) {
            const auto& base = model.params.entry(name);
            model.params.add("smaml.s." + name, base.rows, base.cols,
                             std::vector<double>(base.value.size(), log_s0));
        }
    }
    return model;
}

std::vector<double> maml_predict(const MamlModel& model, const ad::ParamSet& values,
                                 const DenseMatrix& x) {
    const DenseMatrix phi = model.net.forward(x, values);
    const auto& w = values.entry("maml.out_w");
    const auto& b = values.entry("maml.out_b");
    const auto& kr = simd::active();
    std::vector<double> out(x.rows);
    for (int r = 0; r < x.rows; ++r)
        out[r] = kr.dot(phi.row(r), w.value.data(), static_cast<size_t>(phi.cols)) + b.value[0];
    return out;
}

double maml_loglik(const MamlModel& model, const ad::ParamSet& values, const DenseMatrix& x,
                   const std::vector<double>& y) {
    if (static_cast<int>(y.size()) != x.rows)
        throw DimensionMismatch("maml_loglik: label count mismatch");
    const std::vector<double> f = maml_predict(model, values, x);
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - f[i];
        acc += -0.5 * r * r - 0.5 * kLog2Pi;
    }
    return acc;
}

double maml_mse(const MamlModel& model, const ad::ParamSet& values, const DenseMatrix& x,
                const std::vector<double>& y) {
    if (static_cast<int>(y.size()) != x.rows)
        throw DimensionMismatch("maml_mse: label count mismatch");
    if (y.empty()) return 0.0;
    const std::vector<double> f = maml_predict(model, values, x);
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += (y[i] - f[i]) * (y[i] - f[i]);
    return acc / static_cast<double>(y.size());
}

namespace {

ad::Var predict_graph(ad::Tape& t, const MamlModel& model, const std::vector<ad::Var>& psi,
                      ad::Var x) {
    const size_t trunk = model.net.param_names().size();
    const std::vector<ad::Var> w(psi.begin(), psi.begin() + trunk);
    const ad::Var phi = model.net.forward_vars(t, x, w);
    return t.add(t.matmul(phi, psi[trunk]), psi[trunk + 1]);
}

ad::Var loglik_graph(ad::Tape& t, const MamlModel& model, const std::vector<ad::Var>& psi,
                     ad::Var x, ad::Var y) {
    const ad::Var r = t.sub(y, predict_graph(t, model, psi, x));
    const int n = t.shape(r).rows;
    return t.scale_add(t.sum(t.mul(r, r)), -0.5, -0.5 * n * kLog2Pi);
}

struct AdaptGraph {
    std::vector<ad::Var> theta;
    std::vector<ad::Var> psi;
};

AdaptGraph adapt_graph(ad::Tape& t, const MamlModel& model, const Task& task, double rho,
                       int steps, bool first_order) {
    AdaptGraph g;
    for (const auto& name : model.base_param_names())
        g.theta.push_back(t.param(model.params, name));
    g.psi = g.theta;
    if (steps == 0) return g;
    const ad::Var x = t.constant(task.x_support);
    const ad::Var y = t.constant(task.y_support);
    for (int s = 0; s < steps; ++s) {
        const ad::Var ll = loglik_graph(t, model, g.psi, x, y);
        const std::vector<ad::Var> grads = t.grad_graph(ll, g.psi);
        for (size_t k = 0; k < g.psi.size(); ++k) {
            const ad::Var gk = first_order ? t.constant(t.matrix(grads[k])) : grads[k];
            g.psi[k] = t.add(g.psi[k], t.scale_add(gk, rho));
        }
    }
    return g;
}

}  // namespace

ad::ParamSet inner_adapt(const MamlModel& model, const Task& task, double rho, int steps) {
    need_regression(task, "inner_adapt");
    ad::Tape t;
    const AdaptGraph g = adapt_graph(t, model, task, rho, steps, false);
    ad::ParamSet out = model.params;
    const std::vector<std::string> names = model.base_param_names();
    for (size_t k = 0; k < names.size(); ++k) {
        const std::vector<double>& vals = t.values(g.psi[k]);
        for (double v : vals)
            if (!std::isfinite(v))
                throw NonFiniteGradient("inner adaptation produced a non-finite parameter");
        out.entry(names[k]).value = vals;
    }
    return out;
}

ObjectiveParts maml_objective(const MamlModel& model, const Task& task) {
    need_regression(task, "maml_objective");
    ad::Tape t;
    const AdaptGraph g = adapt_graph(t, model, task, model.cfg.inner_lr,
                                     model.cfg.inner_steps_train, model.cfg.first_order);
    const ad::Var ll =
        loglik_graph(t, model, g.psi, t.constant(task.x_query), t.constant(task.y_query));
    const double v = t.value(ll);
    return {v, v, 0.0};
}

std::vector<double> maml_gradient(const MamlModel& model, const Task& task,
                                  ObjectiveParts* parts) {
    need_regression(task, "maml_gradient");
    ad::Tape t;
    const AdaptGraph g = adapt_graph(t, model, task, model.cfg.inner_lr,
                                     model.cfg.inner_steps_train, model.cfg.first_order);
    const ad::Var ll =
        loglik_graph(t, model, g.psi, t.constant(task.x_query), t.constant(task.y_query));
    if (parts) {
        const double v = t.value(ll);
        *parts = {v, v, 0.0};
    }
    return t.gradient(ll, model.params);
}

DenseMatrix smaml_noise(const MamlModel& model, int mc_samples, Rng& rng) {
    int total = 0;
    for (const auto& name : model.base_param_names())
        total += static_cast<int>(model.params.entry(name).value.size());
    DenseMatrix e(mc_samples, total);
    for (auto& v : e.data) v = rng.normal();
    return e;
}

namespace {

struct SmamlVars {
    ad::Var value, datafit, kl;
};

SmamlVars smaml_graph(ad::Tape& t, const MamlModel& model, const Task& task,
                      const DenseMatrix& eps) {
    if (!model.stochastic)
        throw ConfigError("stochastic objective needs a stochastic model", "model");
    const std::vector<std::string> names = model.base_param_names();
    int total = 0;
    for (const auto& name : names) total += static_cast<int>(model.params.entry(name).value.size());
    if (eps.cols != total || eps.rows < 1)
        throw DimensionMismatch("noise must have one row per sample and one column per parameter");

    const AdaptGraph g = adapt_graph(t, model, task, model.cfg.inner_lr,
                                     model.cfg.inner_steps_train, model.cfg.first_order);

    std::vector<ad::Var> s_vars(names.size()), sd_vars(names.size());
    for (size_t k = 0; k < names.size(); ++k) {
        s_vars[k] = t.exp(t.param(model.params, "smaml.s." + names[k]));
        sd_vars[k] = t.powc(s_vars[k], 0.5);
    }

    ad::Var kl;
    for (size_t k = 0; k < names.size(); ++k) {
        const ad::Var delta = t.sub(g.psi[k], g.theta[k]);
        const ad::Var term = t.sum(t.mul(t.mul(delta, delta), t.powc(s_vars[k], -1.0)));
        kl = kl.valid() ? t.add(kl, term) : term;
    }
    kl = t.scale_add(kl, 0.5);

    const ad::Var xq = t.constant(task.x_query);
    const ad::Var yq = t.constant(task.y_query);
    ad::Var acc;
    std::vector<ad::Var> psi_r(names.size());
    for (int r = 0; r < eps.rows; ++r) {
        int off = 0;
        for (size_t k = 0; k < names.size(); ++k) {
            const auto& ent = model.params.entry(names[k]);
            const int sz = static_cast<int>(ent.value.size());
            const DenseMatrix ek(ent.rows, ent.cols,
                                 std::vector<double>(eps.row(r) + off, eps.row(r) + off + sz));
            off += sz;
            psi_r[k] = t.add(g.psi[k], t.mul(sd_vars[k], t.constant(ek)));
        }
        const ad::Var ll = loglik_graph(t, model, psi_r, xq, yq);
        acc = acc.valid() ? t.add(acc, ll) : ll;
    }
    SmamlVars out;
    out.datafit = t.scale_add(acc, 1.0 / eps.rows);
    out.kl = kl;
    out.value = model.cfg.beta == 0.0
                    ? out.datafit
                    : t.sub(out.datafit, t.scale_add(kl, model.cfg.beta));
    return out;
}

}  // namespace

ObjectiveParts stochastic_maml_objective_with_noise(const MamlModel& model, const Task& task,
                                                    const DenseMatrix& eps) {
    need_regression(task, "stochastic_maml_objective");
    ad::Tape t;
    const SmamlVars g = smaml_graph(t, model, task, eps);
    return {t.value(g.value), t.value(g.datafit), t.value(g.kl)};
}

ObjectiveParts stochastic_maml_objective(const MamlModel& model, const Task& task, Rng& rng) {
    const DenseMatrix eps = smaml_noise(model, std::max(1, model.cfg.mc_samples), rng);
    return stochastic_maml_objective_with_noise(model, task, eps);
}

std::vector<double> stochastic_maml_gradient_with_noise(const MamlModel& model, const Task& task,
                                                        const DenseMatrix& eps,
                                                        ObjectiveParts* parts) {
    need_regression(task, "stochastic_maml_gradient");
    ad::Tape t;
    const SmamlVars g = smaml_graph(t, model, task, eps);
    if (parts) *parts = {t.value(g.value), t.value(g.datafit), t.value(g.kl)};
    return t.gradient(g.value, model.params);
}

std::vector<double> stochastic_maml_gradient(const MamlModel& model, const Task& task, Rng& rng,
                                             ObjectiveParts* parts) {
    const DenseMatrix eps = smaml_noise(model, std::max(1, model.cfg.mc_samples), rng);
    return stochastic_maml_gradient_with_noise(model, task, eps, parts);
}

}  // namespace ibmeta
