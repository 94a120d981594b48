#include "ibmeta/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ibmeta/checkpoint.hpp"
#include "ibmeta/config.hpp"
#include "ibmeta/gpvib.hpp"
#include "ibmeta/tasks.hpp"
#include "ibmeta/trainer.hpp"

namespace ibmeta {

namespace {

constexpr uint64_t kPredictNoiseSalt = 0x70726564;  // batch and stream share a draw

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

uint64_t seed_from_string(const std::string& s, const std::string& what) {
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError("expected an unsigned integer seed, got '" + s + "'", what);
    }
}

// IBMETA_SEED beats the config; an explicit --seed flag beats both.
void apply_env_seed(FlatConfig& cfg) {
    if (const char* env = std::getenv("IBMETA_SEED")) cfg["seed"] = env;
}

uint64_t stored_seed(const FlatConfig& cfg) {
    const auto it = cfg.find("seed");
    return it == cfg.end() ? 0 : seed_from_string(it->second, "seed");
}

// "1..7" (inclusive range), "5,10,20", or a single count.
std::vector<int> parse_shot_list(const std::string& text) {
    const auto bad = [&]() -> ConfigError {
        return ConfigError("expected shot counts like 5,10,20 or 1..7, got '" + text + "'",
                           "--shots");
    };
    const auto to_int = [&](const std::string& tok) {
        try {
            size_t pos = 0;
            const int v = std::stoi(tok, &pos);
            if (pos != tok.size() || v < 1) throw std::invalid_argument("bad count");
            return v;
        } catch (const std::exception&) {
            throw bad();
        }
    };
    std::vector<int> shots;
    if (const auto dots = text.find(".."); dots != std::string::npos) {
        const int lo = to_int(text.substr(0, dots));
        const int hi = to_int(text.substr(dots + 2));
        if (lo > hi) throw bad();
        for (int k = lo; k <= hi; ++k) shots.push_back(k);
        return shots;
    }
    size_t start = 0;
    while (start <= text.size()) {
        const size_t comma = text.find(',', start);
        const size_t stop = comma == std::string::npos ? text.size() : comma;
        shots.push_back(to_int(text.substr(start, stop - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (shots.empty()) throw bad();
    return shots;
}

struct Grid {
    double lo = 0.0;
    double hi = 0.0;
    int n = 0;

    double point(int i) const { return n == 1 ? lo : lo + (hi - lo) * i / (n - 1); }
};

Grid parse_grid(const std::string& text) {
    const auto bad = [&]() -> ConfigError {
        return ConfigError("expected a grid like -5:5:100, got '" + text + "'", "--grid");
    };
    const size_t c1 = text.find(':');
    const size_t c2 = c1 == std::string::npos ? std::string::npos : text.find(':', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) throw bad();
    Grid g;
    try {
        size_t pos = 0;
        g.lo = std::stod(text.substr(0, c1), &pos);
        if (pos != c1) throw std::invalid_argument("lo");
        const std::string mid = text.substr(c1 + 1, c2 - c1 - 1);
        g.hi = std::stod(mid, &pos);
        if (pos != mid.size()) throw std::invalid_argument("hi");
        const std::string last = text.substr(c2 + 1);
        g.n = std::stoi(last, &pos);
        if (pos != last.size()) throw std::invalid_argument("n");
    } catch (const std::exception&) {
        throw bad();
    }
    if (g.n < 1 || !std::isfinite(g.lo) || !std::isfinite(g.hi)) throw bad();
    return g;
}

// Every point of every task in a file, support and query roles alike,
// flattened in file order.
struct MergedPoints {
    DenseMatrix x;
    std::vector<double> y;
    std::vector<int> labels;
};

MergedPoints merge_points(const std::vector<Task>& tasks, bool classify,
                          const std::string& which) {
    int n = 0, d = -1;
    for (const auto& t : tasks) {
        if ((t.kind == TaskKind::Classification) != classify)
            throw ConfigError("task file kind does not match the checkpoint", which);
        n += t.support_size() + t.query_size();
        const int td = t.support_size() > 0 ? t.x_support.cols : t.x_query.cols;
        if (d >= 0 && td != d)
            throw ConfigError("tasks disagree on input dimension", which);
        d = td;
    }
    MergedPoints out;
    out.x = DenseMatrix(n, std::max(d, 0));
    out.y.reserve(n);
    out.labels.reserve(n);
    int row = 0;
    const auto take = [&](const DenseMatrix& xs, const std::vector<double>& ys,
                          const std::vector<int>& ls) {
        for (int i = 0; i < xs.rows; ++i, ++row) {
            std::copy(xs.row(i), xs.row(i) + xs.cols, out.x.row(row));
            if (classify)
                out.labels.push_back(ls[i]);
            else
                out.y.push_back(ys[i]);
        }
    };
    for (const auto& t : tasks) {
        take(t.x_support, t.y_support, t.labels_support);
        take(t.x_query, t.y_query, t.labels_query);
    }
    return out;
}

// MC softmax over f_c ~ N(mean_c, var_f), sharing the batch path's noise
// matrix so --stream output matches it within solver precision.
ClassPrediction stream_class_prediction(const StreamPrediction& sp, const DenseMatrix& noise,
                                        int query_index, int n_query) {
    const int n_classes = noise.cols;
    const int reps = noise.rows / n_query;
    const double sd = std::sqrt(std::max(sp.var_f, 0.0));
    ClassPrediction out;
    out.probs.assign(n_classes, 0.0);
    out.means = sp.mean;
    out.var_f = sp.var_f;
    std::vector<double> f(n_classes);
    for (int r = 0; r < reps; ++r) {
        const double* eps = noise.row(r * n_query + query_index);
        double fmax = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n_classes; ++c) {
            f[c] = sp.mean[c] + sd * eps[c];
            fmax = std::max(fmax, f[c]);
        }
        double denom = 0.0;
        for (int c = 0; c < n_classes; ++c) {
            f[c] = std::exp(f[c] - fmax);
            denom += f[c];
        }
        for (int c = 0; c < n_classes; ++c) out.probs[c] += f[c] / denom;
    }
    for (auto& p : out.probs) p /= reps;
    out.label = 0;
    for (int c = 1; c < n_classes; ++c)
        if (sp.mean[c] > sp.mean[out.label]) out.label = c;
    return out;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::optional<std::string>& seed_flag) {
    FlatConfig raw = load_flat_config(config_path);
    apply_env_seed(raw);
    if (seed_flag) raw["seed"] = std::to_string(seed_from_string(*seed_flag, "--seed"));
    const RunConfig cfg = resolve_config(raw);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw ConfigError("cannot create output directory: " + ec.message(), out_dir);
    {
        std::ofstream f(out_dir + "/config.resolved");
        if (!f) throw ConfigError("cannot write config.resolved", out_dir);
        f << dump_config(cfg.values);
    }

    MetaModel model = config_build_model(cfg);
    const TaskGenSpec gen = config_task_spec(cfg);
    TrainConfig tc = config_train(cfg);
    tc.checkpoint_path = out_dir + "/checkpoint";
    const auto save_cb = [&](const MetaModel& m) {
        save_checkpoint(tc.checkpoint_path, m, cfg.values);
    };
    meta_train(model, gen, tc, out_dir + "/metrics.csv", save_cb);
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& shots_text, int n_tasks,
             int inner_steps) {
    if (n_tasks < 1) throw ConfigError("task count must be positive", "--tasks");
    const std::vector<int> shots = parse_shot_list(shots_text);
    LoadedCheckpoint lc = load_checkpoint(ckpt_path);
    apply_env_seed(lc.run_config);
    const RunConfig cfg = resolve_config(lc.run_config);
    const TaskGenSpec gen = config_task_spec(cfg);
    const uint64_t seed = seed_from_string(cfg.at("seed"), "seed");

    const EvalReport rep = evaluate(lc.model, gen, shots, n_tasks, seed, inner_steps);
    std::string out = "{\"shots\":[";
    for (size_t i = 0; i < rep.rows.size(); ++i) {
        const ShotReport& r = rep.rows[i];
        if (i) out += ",";
        out += "{\"K\":" + std::to_string(r.shots) + ",\"metric\":\"" + rep.metric +
               "\",\"mean\":" + fmt9(r.mean) + ",\"ci95\":" + fmt9(r.ci95) + "}";
    }
    out += "]}";
    std::cout << out << "\n";
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& support_path,
                const std::string& query_path, bool stream) {
    LoadedCheckpoint lc = load_checkpoint(ckpt_path);
    apply_env_seed(lc.run_config);
    const uint64_t seed = stored_seed(lc.run_config);
    if (lc.model.kind != ModelKind::GpVib)
        throw ConfigError("prediction needs a gpvib checkpoint", "--checkpoint");
    const GpVibModel& model = lc.model.gpvib;
    const bool classify = !model.is_regression();

    const MergedPoints sup = merge_points(load_tasks(support_path), classify, "--support");
    const MergedPoints qry = merge_points(load_tasks(query_path), classify, "--query");
    const int d = model.net.input_dim;
    if (sup.x.rows > 0 && sup.x.cols != d)
        throw ConfigError("support points do not match the model input dimension", "--support");
    if (qry.x.rows > 0 && qry.x.cols != d)
        throw ConfigError("query points do not match the model input dimension", "--query");
    if (classify)
        for (int l : sup.labels)
            if (l < 0 || l >= model.n_classes)
                throw ConfigError("support label outside the model's classes", "--support");
    const int n_query = qry.x.rows;

    if (stream) {
        StreamState st = stream_begin(model);
        for (int i = 0; i < sup.x.rows; ++i) {
            const std::vector<double> xi(sup.x.row(i), sup.x.row(i) + d);
            if (classify)
                stream_ingest_classification(st, model, xi, sup.labels[i]);
            else
                stream_ingest_regression(st, model, xi, sup.y[i]);
        }
        DenseMatrix noise;
        if (classify) {
            Rng noise_rng(mix_seed(seed, kPredictNoiseSalt));
            noise = classification_noise(n_query, model.n_classes,
                                         std::max(1, model.cfg.mc_samples), noise_rng);
        }
        for (int j = 0; j < n_query; ++j) {
            const std::vector<double> xj(qry.x.row(j), qry.x.row(j) + d);
            const StreamPrediction sp = stream_predict(st, model, xj);
            if (!classify) {
                std::cout << fmt9(sp.mean[0]) << "," << fmt9(sp.var_y) << "\n";
            } else {
                const ClassPrediction p = stream_class_prediction(sp, noise, j, n_query);
                for (double prob : p.probs) std::cout << fmt9(prob) << ",";
                std::cout << p.label << "\n";
            }
        }
        return 0;
    }

    Task cond;
    cond.kind = classify ? TaskKind::Classification : TaskKind::Regression;
    cond.n_classes = model.n_classes;
    cond.x_support = sup.x.rows > 0 ? sup.x : DenseMatrix(0, d);
    cond.y_support = sup.y;
    cond.labels_support = sup.labels;
    cond.x_query = qry.x;
    cond.y_query = classify ? std::vector<double>() : qry.y;
    cond.labels_query = classify ? qry.labels : std::vector<int>();

    if (!classify) {
        for (const RegressionPrediction& p : predict_regression(model, cond, qry.x))
            std::cout << fmt9(p.mean) << "," << fmt9(p.var_y) << "\n";
    } else {
        Rng noise_rng(mix_seed(seed, kPredictNoiseSalt));
        const DenseMatrix noise = classification_noise(
            n_query, model.n_classes, std::max(1, model.cfg.mc_samples), noise_rng);
        for (const ClassPrediction& p :
             predict_classification_with_noise(model, cond, qry.x, noise)) {
            for (double prob : p.probs) std::cout << fmt9(prob) << ",";
            std::cout << p.label << "\n";
        }
    }
    return 0;
}

int cmd_export_curves(const std::string& ckpt_path, const std::string& shots_text,
                      const std::string& grid_text) {
    const std::vector<int> shots = parse_shot_list(shots_text);
    const Grid grid = parse_grid(grid_text);
    LoadedCheckpoint lc = load_checkpoint(ckpt_path);
    apply_env_seed(lc.run_config);
    const RunConfig cfg = resolve_config(lc.run_config);
    if (lc.model.kind != ModelKind::GpVib || !lc.model.gpvib.is_regression())
        throw ConfigError("curve export needs a regression gpvib checkpoint", "--checkpoint");
    if (cfg.at("task.kind") != "sinusoid")
        throw ConfigError("curve export needs the sinusoid task family", "task.kind");
    const TaskGenSpec gen = config_task_spec(cfg);
    const uint64_t seed = seed_from_string(cfg.at("seed"), "seed");

    DenseMatrix x_star(grid.n, 1);
    for (int i = 0; i < grid.n; ++i) x_star.at(i, 0) = grid.point(i);

    // One seed for every K: the amplitude and phase are the leading draws,
    // so the K-shot supports are nested views of the same task.
    std::cout << "K,x,mean,std,truth\n";
    for (int k : shots) {
        const TaskGenSpec gk = with_shots(gen, k);
        const Task task = sample_task(gk, seed);
        const SinusoidTruth truth = sinusoid_truth(std::get<SinusoidSpec>(gk.gen), seed);
        const auto preds = predict_regression(lc.model.gpvib, task, x_star);
        for (int i = 0; i < grid.n; ++i) {
            const double x = x_star.at(i, 0);
            const double sd = std::sqrt(std::max(preds[i].var_f, 0.0));
            const double y = truth.amplitude * std::sin(x + truth.phase);
            std::cout << k << "," << fmt9(x) << "," << fmt9(preds[i].mean) << "," << fmt9(sd)
                      << "," << fmt9(y) << "\n";
        }
    }
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Meta-learning with an information-bottleneck GP readout"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seed_str;
    auto* train = app.add_subcommand("train", "Train a model from a flat key=value config");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--out", out_dir, "output directory")->required();
    auto* seed_opt = train->add_option("--seed", seed_str, "override the config seed");

    std::string eval_ckpt, eval_shots;
    int eval_tasks = 0, eval_inner = -1;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on fresh tasks");
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--shots", eval_shots, "shot counts, e.g. 5,10,20")->required();
    eval->add_option("--tasks", eval_tasks, "number of evaluation tasks")->required();
    eval->add_option("--inner-steps", eval_inner, "test-time adaptation steps (maml)");

    std::string pred_ckpt, pred_support, pred_query;
    bool pred_stream = false;
    auto* predict = app.add_subcommand("predict", "Predict query points given support points");
    predict->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
    predict->add_option("--support", pred_support, "task file of conditioning points")->required();
    predict->add_option("--query", pred_query, "task file of points to predict")->required();
    predict->add_flag("--stream", pred_stream, "ingest support incrementally");

    std::string exp_ckpt, exp_shots, exp_grid;
    auto* exp = app.add_subcommand("export-curves", "Posterior curves over an input grid");
    exp->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
    exp->add_option("--shots", exp_shots, "shot counts, e.g. 1..7")->required();
    exp->add_option("--grid", exp_grid, "input grid lo:hi:n")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // help exits clean; bad usage is a config error
    }

    try {
        if (*train)
            return cmd_train(config_path, out_dir,
                             seed_opt->count() ? std::optional<std::string>(seed_str)
                                               : std::nullopt);
        if (*eval) return cmd_eval(eval_ckpt, eval_shots, eval_tasks, eval_inner);
        if (*predict) return cmd_predict(pred_ckpt, pred_support, pred_query, pred_stream);
        if (*exp) return cmd_export_curves(exp_ckpt, exp_shots, exp_grid);
        std::cerr << "error: no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const StreamingUnsupported& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const NotPositiveDefinite& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NonFiniteGradient& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NonFiniteValue& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ZeroFeatureVector& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace ibmeta
