#include "ibmeta/tasks.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ibmeta {

namespace {

Task sample_sinusoid(const SinusoidSpec& s, uint64_t seed) {
    Rng rng(seed);
    const double amp = rng.uniform(s.amp_min, s.amp_max);
    const double phase = rng.uniform(s.phase_min, s.phase_max);
    Task t;
    t.kind = TaskKind::Regression;
    t.x_support = DenseMatrix(s.shots, 1);
    t.x_query = DenseMatrix(s.query, 1);
    t.y_support.resize(s.shots);
    t.y_query.resize(s.query);
    for (int i = 0; i < s.shots; ++i) {
        const double x = rng.uniform(s.x_min, s.x_max);
        t.x_support.at(i, 0) = x;
        t.y_support[i] = amp * std::sin(x + phase);
    }
    for (int i = 0; i < s.query; ++i) {
        const double x = rng.uniform(s.x_min, s.x_max);
        t.x_query.at(i, 0) = x;
        t.y_query[i] = amp * std::sin(x + phase);
    }
    return t;
}

Task sample_classes(const SyntheticClassesSpec& s, uint64_t seed) {
    Rng rng(seed);
    const double center_sd = std::sqrt(s.center_var);
    const double spread_sd = std::sqrt(s.spread_var);
    DenseMatrix centers(s.ways, s.dim);
    for (auto& v : centers.data) v = rng.normal(0.0, center_sd);

    Task t;
    t.kind = TaskKind::Classification;
    t.n_classes = s.ways;
    t.x_support = DenseMatrix(s.ways * s.shots, s.dim);
    t.x_query = DenseMatrix(s.ways * s.query_per_class, s.dim);
    t.labels_support.resize(t.x_support.rows);
    t.labels_query.resize(t.x_query.rows);
    int si = 0, qi = 0;
    for (int c = 0; c < s.ways; ++c) {
        for (int k = 0; k < s.shots + s.query_per_class; ++k) {
            const bool is_support = k < s.shots;
            double* row = is_support ? t.x_support.row(si) : t.x_query.row(qi);
            for (int d = 0; d < s.dim; ++d) row[d] = centers.at(c, d) + rng.normal(0.0, spread_sd);
            if (is_support)
                t.labels_support[si++] = c;
            else
                t.labels_query[qi++] = c;
        }
    }
    return t;
}

}  // namespace

SinusoidTruth sinusoid_truth(const SinusoidSpec& spec, uint64_t seed) {
    Rng rng(seed);
    SinusoidTruth truth;
    truth.amplitude = rng.uniform(spec.amp_min, spec.amp_max);
    truth.phase = rng.uniform(spec.phase_min, spec.phase_max);
    return truth;
}

Task sample_task(const TaskGenSpec& spec, uint64_t seed) {
    if (const auto* s = std::get_if<SinusoidSpec>(&spec.gen)) return sample_sinusoid(*s, seed);
    if (const auto* s = std::get_if<SyntheticClassesSpec>(&spec.gen)) return sample_classes(*s, seed);
    const auto& f = std::get<FromFileSpec>(spec.gen);
    std::vector<Task> tasks = load_tasks(f.path);
    if (tasks.empty()) throw ParseError("task file holds no tasks", 0);
    return tasks[seed % tasks.size()];
}

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// header: #task kind=regression shots=K | #task kind=classification:N shots=K
void parse_header(const std::string& line, int line_no, Task& t, int& shots) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;  // #task
    bool saw_kind = false, saw_shots = false;
    while (ss >> tok) {
        const size_t eq = tok.find('=');
        if (eq == std::string::npos) throw ParseError("malformed header token", line_no, tok);
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "kind") {
            if (val == "regression") {
                t.kind = TaskKind::Regression;
            } else if (val.rfind("classification:", 0) == 0) {
                t.kind = TaskKind::Classification;
                try {
                    t.n_classes = std::stoi(val.substr(15));
                } catch (const std::exception&) {
                    throw ParseError("bad class count in kind", line_no, "kind");
                }
                if (t.n_classes < 1) throw ParseError("class count must be >= 1", line_no, "kind");
            } else {
                throw ParseError("unknown task kind", line_no, "kind");
            }
            saw_kind = true;
        } else if (key == "shots") {
            try {
                shots = std::stoi(val);
            } catch (const std::exception&) {
                throw ParseError("bad shots value", line_no, "shots");
            }
            saw_shots = true;
        } else {
            throw ParseError("unknown header key", line_no, key);
        }
    }
    if (!saw_kind) throw ParseError("header missing kind", line_no, "kind");
    if (!saw_shots) throw ParseError("header missing shots", line_no, "shots");
}

struct Row {
    char role;
    std::vector<double> x;
    double y;
};

// row: role(x_1,...,x_d)=y
Row parse_row(const std::string& line, int line_no, const Task& task) {
    Row row;
    const size_t open = line.find('(');
    const size_t close = line.find(')');
    const size_t eq = line.find('=', close == std::string::npos ? 0 : close);
    if (open == std::string::npos || close == std::string::npos || eq == std::string::npos ||
        close < open)
        throw ParseError("malformed data row", line_no);
    const std::string role = trim(line.substr(0, open));
    if (role != "s" && role != "q") throw ParseError("role must be s or q", line_no, "role");
    row.role = role[0];

    std::string xs = line.substr(open + 1, close - open - 1);
    std::istringstream ss(xs);
    std::string item;
    int field = 0;
    while (std::getline(ss, item, ',')) {
        ++field;
        item = trim(item);
        size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            throw ParseError("bad input coordinate", line_no, "x_" + std::to_string(field));
        }
        if (used != item.size())
            throw ParseError("bad input coordinate", line_no, "x_" + std::to_string(field));
        row.x.push_back(v);
    }
    if (row.x.empty()) throw ParseError("row has no input coordinates", line_no);

    const std::string y_text = trim(line.substr(eq + 1));
    if (y_text.empty()) throw ParseError("row missing label", line_no, "y");
    size_t used = 0;
    try {
        row.y = std::stod(y_text, &used);
    } catch (const std::exception&) {
        throw ParseError("bad label", line_no, "y");
    }
    if (used != y_text.size()) throw ParseError("bad label", line_no, "y");
    if (task.kind == TaskKind::Classification) {
        const int label = static_cast<int>(row.y);
        if (static_cast<double>(label) != row.y || label < 0 || label >= task.n_classes)
            throw ParseError("label outside 0..N-1", line_no, "y");
    }
    return row;
}

void finish_task(Task& t, const std::vector<Row>& rows, int dim, int first_line) {
    if (rows.empty()) throw ParseError("task has no data rows", first_line);
    int n_s = 0, n_q = 0;
    for (const auto& r : rows) (r.role == 's' ? n_s : n_q) += 1;
    t.x_support = DenseMatrix(n_s, dim);
    t.x_query = DenseMatrix(n_q, dim);
    int si = 0, qi = 0;
    for (const auto& r : rows) {
        const bool sup = r.role == 's';
        double* dst = sup ? t.x_support.row(si) : t.x_query.row(qi);
        std::copy(r.x.begin(), r.x.end(), dst);
        if (t.kind == TaskKind::Regression)
            (sup ? t.y_support : t.y_query).push_back(r.y);
        else
            (sup ? t.labels_support : t.labels_query).push_back(static_cast<int>(r.y));
        (sup ? si : qi) += 1;
    }
}

}  // namespace

std::vector<Task> parse_tasks(const std::string& text) {
    std::vector<Task> tasks;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;

    Task current;
    std::vector<Row> rows;
    int declared_shots = 0;
    int dim = -1;
    int task_line = 0;
    bool in_task = false;

    auto flush = [&]() {
        if (!in_task) return;
        finish_task(current, rows, dim, task_line);
        const int got = current.support_size();
        const int expect = current.kind == TaskKind::Regression
                               ? declared_shots
                               : declared_shots * current.n_classes;
        if (got != expect)
            throw ParseError("support rows disagree with declared shots", task_line, "shots");
        tasks.push_back(std::move(current));
        current = Task{};
        rows.clear();
        in_task = false;
    };

    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty()) continue;
        if (line.rfind("#task", 0) == 0) {
            flush();
            current = Task{};
            declared_shots = 0;
            parse_header(line, line_no, current, declared_shots);
            task_line = line_no;
            in_task = true;
            continue;
        }
        if (line[0] == '#') continue;
        if (!in_task) throw ParseError("data row before any #task header", line_no);
        Row row = parse_row(line, line_no, current);
        if (dim < 0 || rows.empty()) dim = static_cast<int>(row.x.size());
        if (static_cast<int>(row.x.size()) != dim)
            throw ParseError("row dimension differs from task", line_no);
        rows.push_back(std::move(row));
    }
    flush();
    return tasks;
}

std::vector<Task> load_tasks(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open task file: " + path, 0);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_tasks(buf.str());
}

std::string format_tasks(const std::vector<Task>& tasks) {
    std::ostringstream out;
    char num[64];
    auto fmt = [&](double v) {
        std::snprintf(num, sizeof num, "%.17g", v);
        return std::string(num);
    };
    for (const auto& t : tasks) {
        if (t.kind == TaskKind::Regression)
            out << "#task kind=regression shots=" << t.support_size() << "\n";
        else
            out << "#task kind=classification:" << t.n_classes
                << " shots=" << (t.n_classes > 0 ? t.support_size() / t.n_classes : 0) << "\n";
        auto write_rows = [&](const DenseMatrix& x, bool support) {
            for (int r = 0; r < x.rows; ++r) {
                out << (support ? "s(" : "q(");
                for (int c = 0; c < x.cols; ++c) {
                    if (c) out << ",";
                    out << fmt(x.at(r, c));
                }
                out << ")=";
                if (t.kind == TaskKind::Regression)
                    out << fmt(support ? t.y_support[r] : t.y_query[r]);
                else
                    out << (support ? t.labels_support[r] : t.labels_query[r]);
                out << "\n";
            }
        };
        write_rows(t.x_support, true);
        write_rows(t.x_query, false);
    }
    return out.str();
}

void save_tasks(const std::string& path, const std::vector<Task>& tasks) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot open file for writing: " + path, 0);
    f << format_tasks(tasks);
}

}  // namespace ibmeta
