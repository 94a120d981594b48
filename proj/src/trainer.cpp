#include "ibmeta/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace ibmeta {

ObjectiveParts model_objective(const MetaModel& model, const Task& task, Rng& rng) {
    switch (model.kind) {
        case ModelKind::GpVib:
            return vib_objective(model.gpvib, task, rng);
        case ModelKind::Maml:
            return maml_objective(model.maml, task);
        case ModelKind::StochasticMaml:
            return stochastic_maml_objective(model.maml, task, rng);
    }
    throw ConfigError("unknown model kind", "model");
}

std::vector<double> model_gradient(const MetaModel& model, const Task& task, Rng& rng,
                                   ObjectiveParts* parts) {
    switch (model.kind) {
        case ModelKind::GpVib:
            return vib_gradient(model.gpvib, task, rng, parts);
        case ModelKind::Maml:
            return maml_gradient(model.maml, task, parts);
        case ModelKind::StochasticMaml:
            return stochastic_maml_gradient(model.maml, task, rng, parts);
    }
    throw ConfigError("unknown model kind", "model");
}

void adam_step(ad::ParamSet& params, const std::vector<double>& grads, AdamState& state,
               const LrMap& lr) {
    const int total = params.total_size();
    if (static_cast<int>(grads.size()) != total)
        throw DimensionMismatch("adam_step: gradient length mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) throw NonFiniteGradient("adam_step: non-finite gradient");
    if (state.m.empty()) {
        state.m.assign(total, 0.0);
        state.v.assign(total, 0.0);
    }
    if (static_cast<int>(state.m.size()) != total)
        throw DimensionMismatch("adam_step: optimizer state size mismatch");

    state.step += 1;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    int off = 0;
    for (int e = 0; e < params.count(); ++e) {
        auto& ent = params.entry(e);
        const double rate = lr.at(ent.name);
        for (auto& value : ent.value) {
            const double g = grads[off];
            state.m[off] = b1 * state.m[off] + (1.0 - b1) * g;
            state.v[off] = b2 * state.v[off] + (1.0 - b2) * g * g;
            value -= rate * (state.m[off] / c1) / (std::sqrt(state.v[off] / c2) + eps);
            if (!std::isfinite(value))
                throw NonFiniteValue("adam_step: parameter became non-finite");
            ++off;
        }
    }
}

TaskGenSpec with_shots(TaskGenSpec spec, int k) {
    if (auto* s = std::get_if<SinusoidSpec>(&spec.gen))
        s->shots = k;
    else if (auto* c = std::get_if<SyntheticClassesSpec>(&spec.gen))
        c->shots = k;
    return spec;
}

double eval_task_metric(const MetaModel& model, const Task& task, Rng& rng, int maml_steps) {
    const int n_v = task.query_size();
    if (model.kind == ModelKind::GpVib) {
        if (task.kind == TaskKind::Regression) {
            const auto preds = predict_regression(model.gpvib, task, task.x_query);
            double acc = 0.0;
            for (int j = 0; j < n_v; ++j) {
                const double r = task.y_query[j] - preds[j].mean;
                acc += r * r;
            }
            return n_v > 0 ? acc / n_v : 0.0;
        }
        const auto preds = predict_classification(model.gpvib, task, task.x_query, rng);
        int hits = 0;
        for (int j = 0; j < n_v; ++j) hits += preds[j].label == task.labels_query[j] ? 1 : 0;
        return n_v > 0 ? static_cast<double>(hits) / n_v : 0.0;
    }
    const int steps = maml_steps >= 0 ? maml_steps : model.maml.cfg.inner_steps_test;
    const ad::ParamSet adapted = inner_adapt(model.maml, task, model.maml.cfg.inner_lr, steps);
    return maml_mse(model.maml, adapted, task.x_query, task.y_query);
}

EvalReport evaluate(const MetaModel& model, const TaskGenSpec& gen, const std::vector<int>& shots,
                    int n_tasks, uint64_t seed, int maml_steps) {
    EvalReport rep;
    rep.metric = model.is_regression() ? "mse" : "accuracy";
    for (int k : shots) {
        const TaskGenSpec spec_k = with_shots(gen, k);
        std::vector<double> vals;
        vals.reserve(n_tasks);
        for (int i = 0; i < n_tasks; ++i) {
            const uint64_t s = mix_seed(mix_seed(seed, static_cast<uint64_t>(k)),
                                        static_cast<uint64_t>(i));
            const Task task = sample_task(spec_k, s);
            Rng rng(mix_seed(s, 0xACCull));
            vals.push_back(eval_task_metric(model, task, rng, maml_steps));
        }
        ShotReport row;
        row.shots = k;
        row.tasks = n_tasks;
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= std::max(1, n_tasks);
        row.mean = mean;
        if (n_tasks > 1) {
            double ss = 0.0;
            for (double v : vals) ss += (v - mean) * (v - mean);
            row.ci95 = 1.96 * std::sqrt(ss / (n_tasks - 1) / n_tasks);
        }
        rep.rows.push_back(row);
    }
    return rep;
}

TrainSummary meta_train(MetaModel& model, const TaskGenSpec& gen, const TrainConfig& cfg,
                        const std::string& metrics_path,
                        const std::function<void(const MetaModel&)>& save_checkpoint) {
    if (cfg.meta_batch < 1) throw ConfigError("meta_batch must be positive", "train.meta_batch");
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();

    LrMap lr;
    lr.base = cfg.lr;
    if (model.params().has("kernel.v")) lr.overrides["kernel.v"] = cfg.out_scale_lr;

    std::ofstream metrics;
    if (!metrics_path.empty()) {
        metrics.open(metrics_path);
        if (!metrics) throw ConfigError("cannot open metrics log for writing", metrics_path);
        metrics << "episode,objective,kl_term,eval_metric,wallclock_s\n";
    }

    // evaluation uses one fixed task set, on a stream disjoint from training
    const uint64_t eval_salt = mix_seed(cfg.seed, 0x45564153ull);
    auto run_eval = [&]() {
        if (cfg.eval_tasks <= 0) return 0.0;
        double acc = 0.0;
        for (int i = 0; i < cfg.eval_tasks; ++i) {
            const uint64_t s = mix_seed(eval_salt, static_cast<uint64_t>(i));
            const Task task = sample_task(gen, s);
            Rng rng(mix_seed(s, 0xACCull));
            acc += eval_task_metric(model, task, rng, -1);
        }
        return acc / cfg.eval_tasks;
    };

    AdamState state;
    TrainSummary out;
    ad::ParamSet last_good = model.params();
    const int total = model.params().total_size();
    std::vector<double> grad_acc(total);
    double last_eval = 0.0;
    char line[192];

    for (long long e = 0; e < cfg.episodes; ++e) {
        try {
            if (cfg.eval_every > 0 && e % cfg.eval_every == 0) {
                last_eval = run_eval();
                if (e == 0) out.first_eval = last_eval;
            }
            std::fill(grad_acc.begin(), grad_acc.end(), 0.0);
            double obj = 0.0, kl = 0.0;
            const double w = 1.0 / cfg.meta_batch;
            for (int i = 0; i < cfg.meta_batch; ++i) {
                const uint64_t ts = mix_seed(
                    cfg.seed, static_cast<uint64_t>(e) * cfg.meta_batch + static_cast<uint64_t>(i));
                const Task task = sample_task(gen, ts);
                Rng rng(mix_seed(ts, 0xC0FFEEull));
                ObjectiveParts parts;
                const std::vector<double> g = model_gradient(model, task, rng, &parts);
                for (int j = 0; j < total; ++j) grad_acc[j] += w * g[j];
                obj += w * parts.value;
                kl += w * parts.kl;
            }
            for (double& g : grad_acc) g = -g;  // ascend the objective
            adam_step(model.params(), grad_acc, state, lr);
            last_good = model.params();
            out.final_objective = obj;
            out.episodes_run = e + 1;
            if (metrics.is_open()) {
                const double wall = std::chrono::duration<double>(clock::now() - t0).count();
                std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g\n", e, obj, kl,
                              last_eval, wall);
                metrics << line;
            }
        } catch (...) {
            model.params() = last_good;
            if (save_checkpoint) save_checkpoint(model);
            throw;
        }
    }
    out.last_eval = last_eval;
    if (save_checkpoint) save_checkpoint(model);
    return out;
}

}  // namespace ibmeta
