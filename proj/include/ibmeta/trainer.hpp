#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ibmeta/gpvib.hpp"
#include "ibmeta/maml.hpp"
#include "ibmeta/tasks.hpp"

namespace ibmeta {

enum class ModelKind { GpVib, Maml, StochasticMaml };

// One trainable model of any kind; exactly the member matching `kind` is
// populated. Keeping both concrete models (instead of a variant) keeps the
// checkpoint and trainer code free of visitation boilerplate.
struct MetaModel {
    ModelKind kind = ModelKind::GpVib;
    GpVibModel gpvib;
    MamlModel maml;

    ad::ParamSet& params() { return kind == ModelKind::GpVib ? gpvib.params : maml.params; }
    const ad::ParamSet& params() const {
        return kind == ModelKind::GpVib ? gpvib.params : maml.params;
    }
    bool is_regression() const { return kind != ModelKind::GpVib || gpvib.is_regression(); }
};

// Per-task objective (ascent direction) and its gradient, dispatched on kind.
ObjectiveParts model_objective(const MetaModel& model, const Task& task, Rng& rng);
std::vector<double> model_gradient(const MetaModel& model, const Task& task, Rng& rng,
                                   ObjectiveParts* parts = nullptr);

struct LrMap {
    double base = 1e-3;
    std::unordered_map<std::string, double> overrides;  // by parameter name

    double at(const std::string& name) const {
        auto it = overrides.find(name);
        return it == overrides.end() ? base : it->second;
    }
};

struct AdamState {
    std::vector<double> m, v;
    long long step = 0;
};

// Standard Adam descent step (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) with
// bias correction; grads is the flattened gradient of the quantity being
// minimized, laid out in params entry order. The trainer negates objective
// gradients before calling. Throws NonFiniteGradient on bad input.
void adam_step(ad::ParamSet& params, const std::vector<double>& grads, AdamState& state,
               const LrMap& lr);

struct TrainConfig {
    long long episodes = 20000;
    int meta_batch = 5;
    double lr = 1e-3;
    double out_scale_lr = 1e-4;  // applied to "kernel.v" when present
    uint64_t seed = 0;
    long long eval_every = 1000;
    int eval_tasks = 100;
    std::string checkpoint_path;  // written by the CLI; kept for the record
};

struct TrainSummary {
    long long episodes_run = 0;
    double final_objective = 0.0;
    double first_eval = 0.0;  // evaluation of the initialization (episode 0)
    double last_eval = 0.0;
};

// Episodic training: each episode averages objective gradients over
// meta_batch tasks (task seeds derived from cfg.seed and the episode) and
// takes one Adam ascent step. Writes a CSV log to metrics_path when given
// (header: episode,objective,kl_term,eval_metric,wallclock_s); eval_metric
// holds the most recent periodic evaluation on a fixed task set, refreshed
// every eval_every episodes starting at episode 0 (initialization).
// Numerical failures restore the last good parameters, invoke
// save_checkpoint, and rethrow.
TrainSummary meta_train(MetaModel& model, const TaskGenSpec& gen, const TrainConfig& cfg,
                        const std::string& metrics_path = "",
                        const std::function<void(const MetaModel&)>& save_checkpoint = {});

struct ShotReport {
    int shots = 0;
    double mean = 0.0;
    double ci95 = 0.0;  // 1.96 * sample std / sqrt(tasks); 0 for a single task
    int tasks = 0;
};

struct EvalReport {
    std::string metric;  // "mse" or "accuracy"
    std::vector<ShotReport> rows;
};

// Fresh-task evaluation at each requested shot count. Task draws depend
// only on (seed, K, index), so two models evaluated with the same seed see
// identical tasks. maml_steps < 0 uses cfg.inner_steps_test.
EvalReport evaluate(const MetaModel& model, const TaskGenSpec& gen, const std::vector<int>& shots,
                    int n_tasks, uint64_t seed, int maml_steps = -1);

// Copy of spec with the per-task shot count replaced (no-op for file specs).
TaskGenSpec with_shots(TaskGenSpec spec, int k);

// Metric for one task: query MSE for regression models, query accuracy for
// classification. MAML variants adapt for maml_steps first.
double eval_task_metric(const MetaModel& model, const Task& task, Rng& rng, int maml_steps);

}  // namespace ibmeta
