#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "ibmeta/config.hpp"
#include "ibmeta/trainer.hpp"

using namespace ibmeta;

namespace {

MetaModel sinusoid_gpvib(uint64_t init_seed, std::vector<int> hidden = {16}) {
    VibConfig cfg;
    cfg.beta = 1.0;
    cfg.encoder = EncoderKind::ExactPosterior;
    cfg.kernel.type = KernelSpec::Type::Linear;
    Rng rng(init_seed);
    MetaModel m;
    m.kind = ModelKind::GpVib;
    m.gpvib = make_gpvib_model(cfg, 1, hidden, Activation::Tanh, 0, rng);
    return m;
}

// f(x) = out_w * x + out_b with both weights zeroed; adaptation moves only
// out_b on tasks whose inputs sit at x = 0.
MetaModel bias_only_maml(const MamlConfig& cfg) {
    Rng rng(1);
    MetaModel m;
    m.kind = ModelKind::Maml;
    m.maml = make_maml_model(cfg, 1, {}, Activation::Relu, false, rng);
    for (double& w : m.maml.params.entry("maml.out_w").value) w = 0.0;
    m.maml.params.entry("maml.out_b").value[0] = 0.0;
    return m;
}

TaskGenSpec sinusoid_gen(int shots, int query) {
    SinusoidSpec s;
    s.shots = shots;
    s.query = query;
    TaskGenSpec gen;
    gen.gen = s;
    return gen;
}

TaskGenSpec file_gen(const std::string& path, const std::vector<Task>& tasks) {
    save_tasks(path, tasks);
    TaskGenSpec gen;
    gen.gen = FromFileSpec{path};
    return gen;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

// a metrics row with the trailing wallclock field removed
std::string drop_last_field(const std::string& row) {
    const auto pos = row.rfind(',');
    REQUIRE(pos != std::string::npos);
    return row.substr(0, pos);
}

std::vector<double> split_row(const std::string& row) {
    std::vector<double> out;
    std::stringstream ss(row);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(std::stod(field));
    return out;
}

}  // namespace

TEST_CASE("adam first step moves a parameter by the learning rate") {
    ad::ParamSet params;
    params.add_scalar("theta", 1.0);
    AdamState state;
    LrMap lr;
    lr.base = 1e-3;
    adam_step(params, {2.0}, state, lr);  // gradient of theta^2 at 1
    CHECK(params.entry("theta").value[0] == doctest::Approx(0.999).epsilon(1e-9));
    CHECK(state.step == 1);
}

TEST_CASE("adam leaves parameters unchanged on a zero gradient") {
    ad::ParamSet params;
    params.add("a", 2, 1, {0.7, -1.3});
    params.add_scalar("b", 2.5);
    const std::vector<double> before = params.flatten();
    AdamState state;
    LrMap lr;
    adam_step(params, {0.0, 0.0, 0.0}, state, lr);
    adam_step(params, {0.0, 0.0, 0.0}, state, lr);
    CHECK(params.flatten() == before);
}

TEST_CASE("adam converges on a convex quadratic") {
    // minimize (w0 - 0.3)^2 + 25 (w1 - 1.2)^2; optimum known in closed form.
    // adam moves at most lr per step, so the start sits within 1000 * lr of
    // the optimum to leave room for full convergence
    ad::ParamSet params;
    params.add("w", 2, 1, {1.0, 0.5});
    AdamState state;
    LrMap lr;
    lr.base = 1e-2;
    for (int t = 0; t < 1000; ++t) {
        const auto& w = params.entry("w").value;
        adam_step(params, {2.0 * (w[0] - 0.3), 50.0 * (w[1] - 1.2)}, state, lr);
    }
    const auto& w = params.entry("w").value;
    CHECK(std::fabs(w[0] - 0.3) < 1e-4);
    CHECK(std::fabs(w[1] - 1.2) < 1e-4);
}

TEST_CASE("per-group learning rates select by parameter name") {
    LrMap lr;
    lr.base = 1e-3;
    lr.overrides["kernel.v"] = 1e-4;
    CHECK(lr.at("kernel.v") == 1e-4);
    CHECK(lr.at("anything.else") == 1e-3);

    ad::ParamSet params;
    params.add_scalar("kernel.v", 0.2);
    params.add_scalar("net.w", 0.5);
    AdamState state;
    adam_step(params, {1.0, 1.0}, state, lr);
    // first-step magnitude equals the group's learning rate
    CHECK(0.2 - params.entry("kernel.v").value[0] == doctest::Approx(1e-4).epsilon(1e-6));
    CHECK(0.5 - params.entry("net.w").value[0] == doctest::Approx(1e-3).epsilon(1e-6));
}

TEST_CASE("adam rejects bad gradients") {
    ad::ParamSet params;
    params.add_scalar("theta", 1.0);
    AdamState state;
    LrMap lr;
    CHECK_THROWS_AS(adam_step(params, {std::nan("")}, state, lr), NonFiniteGradient);
    CHECK_THROWS_AS(adam_step(params, {1.0, 2.0}, state, lr), DimensionMismatch);
    CHECK(params.entry("theta").value[0] == 1.0);  // failed steps do not touch values
}

TEST_CASE("meta_train with zero episodes returns the initialization unchanged") {
    MetaModel model = sinusoid_gpvib(3, {6});
    const std::vector<double> before = model.params().flatten();
    TrainConfig cfg;
    cfg.episodes = 0;
    cfg.seed = 5;
    const std::string path = testutil::tmp_dir() + "/metrics_zero.csv";
    const TrainSummary sum = meta_train(model, sinusoid_gen(5, 8), cfg, path);
    CHECK(sum.episodes_run == 0);
    CHECK(model.params().flatten() == before);
    const auto lines = read_lines(path);
    REQUIRE(lines.size() == 1);  // header only
    CHECK(lines[0] == "episode,objective,kl_term,eval_metric,wallclock_s");
}

TEST_CASE("same seed reproduces the metrics log except wallclock") {
    TrainConfig cfg;
    cfg.episodes = 25;
    cfg.meta_batch = 2;
    cfg.seed = 99;
    cfg.eval_every = 10;
    cfg.eval_tasks = 4;
    const TaskGenSpec gen = sinusoid_gen(5, 8);
    const std::string p1 = testutil::tmp_dir() + "/metrics_a.csv";
    const std::string p2 = testutil::tmp_dir() + "/metrics_b.csv";

    MetaModel m1 = sinusoid_gpvib(42, {8});
    MetaModel m2 = sinusoid_gpvib(42, {8});
    REQUIRE(m1.params().flatten() == m2.params().flatten());
    meta_train(m1, gen, cfg, p1);
    meta_train(m2, gen, cfg, p2);

    CHECK(m1.params().flatten() == m2.params().flatten());
    const auto l1 = read_lines(p1);
    const auto l2 = read_lines(p2);
    REQUIRE(l1.size() == l2.size());
    REQUIRE(l1.size() == 26);  // header + one row per episode
    CHECK(l1[0] == l2[0]);
    for (size_t i = 1; i < l1.size(); ++i) CHECK(drop_last_field(l1[i]) == drop_last_field(l2[i]));

    SUBCASE("episode numbering, finiteness, and the eval refresh cadence") {
        double prev_wall = 0.0;
        double block_eval = 0.0;
        for (size_t i = 1; i < l1.size(); ++i) {
            const auto f = split_row(l1[i]);
            REQUIRE(f.size() == 5);
            CHECK(f[0] == double(i - 1));
            for (double v : f) CHECK(std::isfinite(v));
            CHECK(f[4] >= prev_wall);
            prev_wall = f[4];
            const long long e = i - 1;
            if (e % cfg.eval_every == 0) block_eval = f[3];
            CHECK(f[3] == block_eval);  // held constant between refreshes
        }
    }
}

TEST_CASE("a numerical failure invokes the checkpoint hook and rethrows") {
    MamlConfig mc;
    MetaModel model = bias_only_maml(mc);
    model.maml.params.entry("maml.out_b").value[0] = std::nan("");
    TrainConfig cfg;
    cfg.episodes = 3;
    cfg.meta_batch = 1;
    cfg.eval_tasks = 0;
    bool saved = false;
    CHECK_THROWS_AS(meta_train(model, sinusoid_gen(3, 3), cfg, "",
                               [&](const MetaModel&) { saved = true; }),
                    NonFiniteGradient);
    CHECK(saved);
}

TEST_CASE("trainer dispatches all three model kinds") {
    const TaskGenSpec gen = sinusoid_gen(4, 4);
    TrainConfig cfg;
    cfg.episodes = 3;
    cfg.meta_batch = 2;
    cfg.eval_tasks = 2;
    cfg.seed = 17;

    MamlConfig mc;
    mc.inner_steps_train = 1;
    for (ModelKind kind : {ModelKind::GpVib, ModelKind::Maml, ModelKind::StochasticMaml}) {
        MetaModel model;
        if (kind == ModelKind::GpVib) {
            model = sinusoid_gpvib(2, {6});
        } else {
            Rng rng(2);
            model.kind = kind;
            model.maml =
                make_maml_model(mc, 1, {6}, Activation::Tanh, kind == ModelKind::StochasticMaml,
                                rng);
        }
        const std::vector<double> before = model.params().flatten();
        const TrainSummary sum = meta_train(model, gen, cfg);
        CHECK(sum.episodes_run == 3);
        CHECK(std::isfinite(sum.final_objective));
        const std::vector<double> after = model.params().flatten();
        CHECK(after != before);
        for (double v : after) CHECK(std::isfinite(v));
    }
}

TEST_CASE("evaluate scores a perfect predictor at exactly zero error") {
    MamlConfig mc;
    MetaModel model = bias_only_maml(mc);  // predicts 0 everywhere
    Task t;
    t.kind = TaskKind::Regression;
    t.x_support = DenseMatrix(2, 1);
    t.x_support.at(0, 0) = 0.5;
    t.x_support.at(1, 0) = -0.3;
    t.y_support = {0.0, 0.0};
    t.x_query = DenseMatrix(3, 1);
    t.x_query.at(0, 0) = 1.0;
    t.x_query.at(1, 0) = 2.0;
    t.x_query.at(2, 0) = 3.0;
    t.y_query = {0.0, 0.0, 0.0};
    const TaskGenSpec gen = file_gen(testutil::tmp_dir() + "/zero.tasks", {t});

    const EvalReport rep = evaluate(model, gen, {5}, 4, 3, 0);
    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.metric == "mse");
    CHECK(rep.rows[0].shots == 5);
    CHECK(rep.rows[0].tasks == 4);
    CHECK(rep.rows[0].mean == 0.0);
    CHECK(rep.rows[0].ci95 == 0.0);
}

TEST_CASE("evaluate adapts maml with the configured test-step count") {
    MamlConfig mc;
    mc.inner_lr = 0.25;
    mc.inner_steps_test = 2;
    MetaModel model = bias_only_maml(mc);

    // support and query all at x = 0 with y = 1: after n steps at rho = 0.25
    // the bias is 1 - 0.5^n, so the query MSE is 0.25^n exactly
    Task t;
    t.kind = TaskKind::Regression;
    t.x_support = DenseMatrix(2, 1);
    t.y_support = {1.0, 1.0};
    t.x_query = DenseMatrix(1, 1);
    t.y_query = {1.0};
    const TaskGenSpec gen = file_gen(testutil::tmp_dir() + "/bias.tasks", {t});

    CHECK(evaluate(model, gen, {1}, 3, 0, 0).rows[0].mean == 1.0);
    CHECK(evaluate(model, gen, {1}, 3, 0, 1).rows[0].mean == 0.25);
    const EvalReport rep = evaluate(model, gen, {1}, 3, 0, -1);  // falls back to 2 test steps
    CHECK(rep.rows[0].mean == 0.0625);
    CHECK(rep.rows[0].ci95 == 0.0);  // identical tasks leave no spread
}

TEST_CASE("a model with no class preference scores at chance level") {
    VibConfig vc;
    vc.beta = 0.001;
    vc.mc_samples = 50;
    vc.encoder = EncoderKind::Simplified;
    vc.kernel.type = KernelSpec::Type::Linear;
    Rng rng(9);
    MetaModel model;
    model.kind = ModelKind::GpVib;
    model.gpvib = make_gpvib_model(vc, 4, {}, Activation::Relu, 4, rng);
    model.gpvib.params.entry("enc.m_tilde").value[0] = 0.0;  // every class mean collapses to 0

    SyntheticClassesSpec spec;
    spec.ways = 4;
    spec.shots = 2;
    spec.query_per_class = 3;
    spec.dim = 4;
    TaskGenSpec gen;
    gen.gen = spec;

    const EvalReport rep = evaluate(model, gen, {2}, 150, 11);
    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.metric == "accuracy");
    // all class means tie at zero, so the lowest-index rule always answers
    // class 0; balanced queries then score exactly 1/ways on every task
    CHECK(rep.rows[0].mean == 0.25);
    CHECK(rep.rows[0].ci95 == 0.0);
}

TEST_CASE("confidence interval is 1.96 sigma over root tasks") {
    MetaModel model = sinusoid_gpvib(8, {6});
    const TaskGenSpec gen = sinusoid_gen(5, 8);
    const uint64_t seed = 5;
    const int k = 3, n_tasks = 6;
    const EvalReport rep = evaluate(model, gen, {k}, n_tasks, seed);

    // recompute from the same task stream
    const TaskGenSpec spec_k = with_shots(gen, k);
    std::vector<double> vals;
    for (int i = 0; i < n_tasks; ++i) {
        const uint64_t s = mix_seed(mix_seed(seed, uint64_t(k)), uint64_t(i));
        const Task task = sample_task(spec_k, s);
        Rng rng(mix_seed(s, 0xACCull));
        vals.push_back(eval_task_metric(model, task, rng, -1));
    }
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= n_tasks;
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    const double ci = 1.96 * std::sqrt(ss / (n_tasks - 1) / n_tasks);

    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.rows[0].mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(rep.rows[0].ci95 == doctest::Approx(ci).epsilon(1e-12));
    CHECK(rep.rows[0].ci95 > 0.0);

    SUBCASE("a single task reports a zero-width interval") {
        const EvalReport one = evaluate(model, gen, {k}, 1, seed);
        CHECK(one.rows[0].ci95 == 0.0);
        CHECK(one.rows[0].tasks == 1);
    }
}

TEST_CASE("evaluate is deterministic for a fixed seed") {
    MetaModel model = sinusoid_gpvib(4, {6});
    const TaskGenSpec gen = sinusoid_gen(5, 8);
    const EvalReport a = evaluate(model, gen, {2, 5}, 10, 123);
    const EvalReport b = evaluate(model, gen, {2, 5}, 10, 123);
    REQUIRE(a.rows.size() == 2);
    CHECK(a.rows[0].shots == 2);
    CHECK(a.rows[1].shots == 5);
    CHECK(a.rows[0].mean == b.rows[0].mean);
    CHECK(a.rows[1].mean == b.rows[1].mean);
    CHECK(a.rows[0].ci95 == b.rows[0].ci95);

    const EvalReport c = evaluate(model, gen, {2, 5}, 10, 124);
    CHECK(a.rows[0].mean != c.rows[0].mean);
}

TEST_CASE("with_shots rewrites the shot count for generated specs") {
    TaskGenSpec sin = sinusoid_gen(5, 8);
    const TaskGenSpec sin9 = with_shots(sin, 9);
    CHECK(std::get<SinusoidSpec>(sin9.gen).shots == 9);
    CHECK(std::get<SinusoidSpec>(sin9.gen).query == 8);
    CHECK(std::get<SinusoidSpec>(sin.gen).shots == 5);  // original untouched

    TaskGenSpec cls;
    cls.gen = SyntheticClassesSpec{};
    CHECK(std::get<SyntheticClassesSpec>(with_shots(cls, 2).gen).shots == 2);

    TaskGenSpec file;
    file.gen = FromFileSpec{"tasks.txt"};
    const TaskGenSpec same = with_shots(file, 7);
    CHECK(std::get<FromFileSpec>(same.gen).path == "tasks.txt");
}

TEST_CASE("two thousand training episodes cut the evaluation error by an order of magnitude") {
    // the stock sinusoid configuration, trained exactly as the command line
    // front end would run it
    const RunConfig rc = resolve_config({{"seed", "7"},
                                         {"train.episodes", "2000"},
                                         {"train.eval_every", "250"},
                                         {"train.eval_tasks", "50"}});
    MetaModel model = config_build_model(rc);
    const TaskGenSpec gen = config_task_spec(rc);
    const TrainConfig cfg = config_train(rc);
    const std::string metrics = testutil::tmp_dir() + "/metrics_long.csv";
    const TrainSummary sum = meta_train(model, gen, cfg, metrics);
    const double init_mse = sum.first_eval;

    // score the final parameters on the identical eval task set
    TrainConfig probe = cfg;
    probe.episodes = 1;
    probe.eval_every = 1;
    probe.eval_tasks = cfg.eval_tasks;
    const double trained_mse = meta_train(model, gen, probe).first_eval;

    CHECK(init_mse > 0.5);  // an untrained model is far off
    CHECK(trained_mse <= init_mse / 10.0);

    SUBCASE("objective trend: disjoint block means increase throughout") {
        // the per-episode objective is dominated by task-sampling noise, so
        // the trend shows in block averages rather than a sliding window
        const auto lines = read_lines(metrics);
        REQUIRE(lines.size() == 2001);
        std::vector<double> obj;
        for (size_t i = 1; i < lines.size(); ++i) obj.push_back(split_row(lines[i])[1]);

        const int block = 250;
        std::vector<double> means;
        for (size_t t = 0; t + block <= obj.size(); t += block) {
            double s = 0.0;
            for (size_t j = t; j < t + block; ++j) s += obj[j];
            means.push_back(s / block);
        }
        REQUIRE(means.size() == 8);
        for (size_t t = 1; t < means.size(); ++t) CHECK(means[t] > means[t - 1]);
    }
}
