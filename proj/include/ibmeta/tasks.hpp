#pragma once

#include <string>
#include <variant>
#include <vector>

#include "ibmeta/linalg.hpp"
#include "ibmeta/rng.hpp"

namespace ibmeta {

enum class TaskKind { Regression, Classification };

// One episode: support set (adapted on) and query set (evaluated on).
// Regression targets live in y_*; classification labels in labels_*.
struct Task {
    TaskKind kind = TaskKind::Regression;
    int n_classes = 0;  // classification only
    DenseMatrix x_support;  // n_t x d
    DenseMatrix x_query;    // n_v x d
    std::vector<double> y_support, y_query;
    std::vector<int> labels_support, labels_query;

    int support_size() const { return x_support.rows; }
    int query_size() const { return x_query.rows; }
    int input_dim() const { return x_support.cols; }
};

struct SinusoidSpec {
    double amp_min = 0.1, amp_max = 5.0;
    double phase_min = 0.0, phase_max = 3.14159265358979323846;
    double x_min = -5.0, x_max = 5.0;
    int shots = 10;
    int query = 50;
};

struct SyntheticClassesSpec {
    int ways = 5;
    int shots = 5;
    int query_per_class = 15;
    int dim = 16;
    double center_var = 4.0;  // class centers ~ N(0, center_var * I)
    double spread_var = 1.0;  // points ~ N(center, spread_var * I)
};

struct FromFileSpec {
    std::string path;
};

struct TaskGenSpec {
    std::variant<SinusoidSpec, SyntheticClassesSpec, FromFileSpec> gen;

    bool is_regression() const { return !std::holds_alternative<SyntheticClassesSpec>(gen); }
};

// Deterministic: the same seed always produces the identical task.
// FromFile specs index into the file's task list by seed modulo its length.
Task sample_task(const TaskGenSpec& spec, uint64_t seed);

// Amplitude and phase behind a sampled sinusoid task (for ground-truth
// curves); consumes the same leading draws as sample_task.
struct SinusoidTruth {
    double amplitude;
    double phase;
};
SinusoidTruth sinusoid_truth(const SinusoidSpec& spec, uint64_t seed);

// Line-oriented task file: each task starts with
//   #task kind=regression shots=K      or   #task kind=classification:N shots=K
// followed by one row per point, "role(x_1,...,x_d)=y" with role s or q.
// Other #-lines are comments; blank lines are skipped.
std::vector<Task> load_tasks(const std::string& path);
void save_tasks(const std::string& path, const std::vector<Task>& tasks);
std::vector<Task> parse_tasks(const std::string& text);
std::string format_tasks(const std::vector<Task>& tasks);

}  // namespace ibmeta
