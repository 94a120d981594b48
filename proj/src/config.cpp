#include "ibmeta/config.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

namespace ibmeta {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

double parse_num(const std::string& value, const std::string& key) {
    try {
        size_t used = 0;
        const double x = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing text");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("expected a number, got '" + value + "'", key);
    }
}

long long parse_int(const std::string& value, const std::string& key) {
    try {
        size_t used = 0;
        const long long x = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing text");
        return x;
    } catch (const std::exception&) {
        throw ConfigError("expected an integer, got '" + value + "'", key);
    }
}

bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("expected true or false, got '" + value + "'", key);
}

uint64_t parse_u64(const std::string& value, const std::string& key) {
    try {
        size_t used = 0;
        const unsigned long long x = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing text");
        return static_cast<uint64_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("expected an unsigned integer, got '" + value + "'", key);
    }
}

std::vector<int> parse_int_list(const std::string& value, const std::string& key) {
    std::vector<int> out;
    std::string buf;
    std::stringstream ss(value);
    while (std::getline(ss, buf, ',')) {
        buf = trim(buf);
        if (buf.empty()) throw ConfigError("empty list entry", key);
        const long long x = parse_int(buf, key);
        if (x < 1) throw ConfigError("list entries must be positive", key);
        out.push_back(static_cast<int>(x));
    }
    return out;
}

}  // namespace

FlatConfig parse_flat_config(const std::string& text) {
    FlatConfig out;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("expected key=value", line_no);
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ParseError("empty key", line_no);
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

FlatConfig load_flat_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file", path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_flat_config(buf.str());
}

const std::string& RunConfig::at(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("missing config key", key);
    return it->second;
}

double RunConfig::num(const std::string& key) const { return parse_num(at(key), key); }
long long RunConfig::integer(const std::string& key) const { return parse_int(at(key), key); }
bool RunConfig::flag(const std::string& key) const { return parse_bool(at(key), key); }

std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::GpVib:
            return "gpvib";
        case ModelKind::Maml:
            return "maml";
        case ModelKind::StochasticMaml:
            return "smaml";
    }
    return "gpvib";
}

std::string to_string(EncoderKind k) {
    switch (k) {
        case EncoderKind::ExactPosterior:
            return "exact-posterior";
        case EncoderKind::Amortized:
            return "amortized";
        case EncoderKind::Simplified:
            return "simplified";
    }
    return "simplified";
}

std::string to_string(KernelSpec::Type t) {
    return t == KernelSpec::Type::Linear ? "linear" : "cosine";
}

std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

ModelKind model_kind_from(const std::string& s) {
    if (s == "gpvib") return ModelKind::GpVib;
    if (s == "maml") return ModelKind::Maml;
    if (s == "smaml") return ModelKind::StochasticMaml;
    throw ConfigError("unknown model kind '" + s + "'", "model");
}

EncoderKind encoder_from(const std::string& s) {
    if (s == "exact-posterior") return EncoderKind::ExactPosterior;
    if (s == "amortized") return EncoderKind::Amortized;
    if (s == "simplified") return EncoderKind::Simplified;
    throw ConfigError("unknown encoder '" + s + "'", "vib.encoder");
}

KernelSpec::Type kernel_type_from(const std::string& s) {
    if (s == "linear") return KernelSpec::Type::Linear;
    if (s == "cosine") return KernelSpec::Type::Cosine;
    throw ConfigError("unknown kernel type '" + s + "'", "kernel.type");
}

Activation activation_from(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    throw ConfigError("unknown activation '" + s + "'", "net.activation");
}

RunConfig resolve_config(const FlatConfig& raw) {
    RunConfig cfg;
    cfg.values = raw;
    FlatConfig& v = cfg.values;
    std::set<std::string> allowed;
    auto def = [&](const std::string& key, const std::string& value) {
        allowed.insert(key);
        if (!v.count(key)) v[key] = value;
    };

    def("model", "gpvib");
    const ModelKind kind = model_kind_from(v["model"]);
    def("seed", "0");
    parse_u64(v["seed"], "seed");
    def("task.kind", "sinusoid");
    const std::string& task_kind = v["task.kind"];

    if (task_kind == "sinusoid") {
        def("task.shots", "10");
        def("task.query", "50");
        def("task.amp_min", "0.1");
        def("task.amp_max", "5");
        def("task.phase_min", "0");
        def("task.phase_max", "3.141592653589793");
        def("task.x_min", "-5");
        def("task.x_max", "5");
        if (parse_int(v["task.shots"], "task.shots") < 1)
            throw ConfigError("shots must be at least 1", "task.shots");
        if (parse_int(v["task.query"], "task.query") < 1)
            throw ConfigError("query size must be at least 1", "task.query");
        if (parse_num(v["task.amp_min"], "task.amp_min") >
            parse_num(v["task.amp_max"], "task.amp_max"))
            throw ConfigError("amplitude range is empty", "task.amp_min");
        if (parse_num(v["task.phase_min"], "task.phase_min") >
            parse_num(v["task.phase_max"], "task.phase_max"))
            throw ConfigError("phase range is empty", "task.phase_min");
        if (parse_num(v["task.x_min"], "task.x_min") >= parse_num(v["task.x_max"], "task.x_max"))
            throw ConfigError("input range is empty", "task.x_min");
        cfg.classification = false;
        cfg.n_classes = 0;
        cfg.input_dim = 1;
    } else if (task_kind == "classes") {
        def("task.ways", "5");
        def("task.shots", "5");
        def("task.query_per_class", "15");
        def("task.dim", "16");
        def("task.center_var", "4");
        def("task.spread_var", "1");
        const long long ways = parse_int(v["task.ways"], "task.ways");
        if (ways < 2) throw ConfigError("classification needs at least 2 ways", "task.ways");
        if (parse_int(v["task.shots"], "task.shots") < 1)
            throw ConfigError("shots must be at least 1", "task.shots");
        if (parse_int(v["task.query_per_class"], "task.query_per_class") < 1)
            throw ConfigError("query_per_class must be at least 1", "task.query_per_class");
        const long long dim = parse_int(v["task.dim"], "task.dim");
        if (dim < 1) throw ConfigError("input dimension must be positive", "task.dim");
        if (parse_num(v["task.center_var"], "task.center_var") <= 0.0 ||
            parse_num(v["task.spread_var"], "task.spread_var") <= 0.0)
            throw ConfigError("variances must be positive", "task.center_var");
        cfg.classification = true;
        cfg.n_classes = static_cast<int>(ways);
        cfg.input_dim = static_cast<int>(dim);
    } else if (task_kind == "file") {
        allowed.insert("task.path");
        if (!v.count("task.path") || v["task.path"].empty())
            throw ConfigError("task.path is required for file tasks", "task.path");
        TaskGenSpec probe;
        probe.gen = FromFileSpec{v["task.path"]};
        const Task t0 = sample_task(probe, 0);
        cfg.classification = t0.kind == TaskKind::Classification;
        cfg.n_classes = t0.n_classes;
        cfg.input_dim = t0.input_dim();
    } else {
        throw ConfigError("unknown task kind '" + task_kind + "'", "task.kind");
    }

    def("train.episodes", "20000");
    def("train.meta_batch", cfg.classification ? "4" : "5");
    def("train.lr", "0.001");
    def("train.out_scale_lr", "0.0001");
    def("train.eval_every", "1000");
    def("train.eval_tasks", "100");
    if (parse_int(v["train.episodes"], "train.episodes") < 1)
        throw ConfigError("episodes must be at least 1", "train.episodes");
    if (parse_int(v["train.meta_batch"], "train.meta_batch") < 1)
        throw ConfigError("meta_batch must be at least 1", "train.meta_batch");
    if (parse_num(v["train.lr"], "train.lr") <= 0.0)
        throw ConfigError("learning rate must be positive", "train.lr");
    if (parse_num(v["train.out_scale_lr"], "train.out_scale_lr") <= 0.0)
        throw ConfigError("learning rate must be positive", "train.out_scale_lr");
    if (parse_int(v["train.eval_every"], "train.eval_every") < 0)
        throw ConfigError("eval_every cannot be negative", "train.eval_every");
    if (parse_int(v["train.eval_tasks"], "train.eval_tasks") < 0)
        throw ConfigError("eval_tasks cannot be negative", "train.eval_tasks");

    def("net.hidden", cfg.classification ? "64,64" : "40,40");
    def("net.activation", "relu");
    def("net.augment", "true");
    parse_int_list(v["net.hidden"], "net.hidden");
    activation_from(v["net.activation"]);
    parse_bool(v["net.augment"], "net.augment");

    if (kind == ModelKind::GpVib) {
        def("vib.beta", cfg.classification ? "0.001" : "1");
        def("vib.mc_samples", "200");
        def("vib.encoder", cfg.classification ? "simplified" : "exact-posterior");
        if (!cfg.classification) def("vib.log_noise_init", "-4.605170185988091");
        def("kernel.type", cfg.classification ? "cosine" : "linear");
        def("kernel.v", "0");
        def("kernel.fixed_variance", cfg.classification ? "none" : "auto");

        if (parse_num(v["vib.beta"], "vib.beta") < 0.0)
            throw ConfigError("beta cannot be negative", "vib.beta");
        if (parse_int(v["vib.mc_samples"], "vib.mc_samples") < 1)
            throw ConfigError("mc_samples must be at least 1", "vib.mc_samples");
        const EncoderKind enc = encoder_from(v["vib.encoder"]);
        if (cfg.classification && enc == EncoderKind::ExactPosterior)
            throw ConfigError("exact-posterior encoder requires a regression task", "vib.encoder");
        if (!cfg.classification) parse_num(v["vib.log_noise_init"], "vib.log_noise_init");
        kernel_type_from(v["kernel.type"]);
        parse_num(v["kernel.v"], "kernel.v");
        const std::string& fv = v["kernel.fixed_variance"];
        if (fv != "auto" && fv != "none" && parse_num(fv, "kernel.fixed_variance") <= 0.0)
            throw ConfigError("fixed variance must be positive, auto, or none",
                              "kernel.fixed_variance");
    } else {
        if (cfg.classification)
            throw ConfigError("maml models support regression tasks only", "model");
        def("maml.inner_lr", "0.01");
        def("maml.steps_train", "1");
        def("maml.steps_test", "10");
        def("maml.first_order", "false");
        if (kind == ModelKind::StochasticMaml) {
            def("maml.beta", "1");
            def("maml.s_init", "0.0001");
            def("maml.mc_samples", "1");
            if (parse_num(v["maml.beta"], "maml.beta") < 0.0)
                throw ConfigError("beta cannot be negative", "maml.beta");
            if (parse_num(v["maml.s_init"], "maml.s_init") < 0.0)
                throw ConfigError("s_init cannot be negative", "maml.s_init");
            if (parse_int(v["maml.mc_samples"], "maml.mc_samples") < 1)
                throw ConfigError("mc_samples must be at least 1", "maml.mc_samples");
        }
        if (parse_num(v["maml.inner_lr"], "maml.inner_lr") <= 0.0)
            throw ConfigError("inner learning rate must be positive", "maml.inner_lr");
        if (parse_int(v["maml.steps_train"], "maml.steps_train") < 0)
            throw ConfigError("adaptation steps cannot be negative", "maml.steps_train");
        if (parse_int(v["maml.steps_test"], "maml.steps_test") < 0)
            throw ConfigError("adaptation steps cannot be negative", "maml.steps_test");
        parse_bool(v["maml.first_order"], "maml.first_order");
    }

    for (const auto& [key, value] : raw) {
        (void)value;
        if (!allowed.count(key)) throw ConfigError("unknown config key", key);
    }
    return cfg;
}

std::string dump_config(const FlatConfig& values) {
    std::string out;
    for (const auto& [key, value] : values) {
        out += key;
        out += '=';
        out += value;
        out += '\n';
    }
    return out;
}

ModelKind config_model_kind(const RunConfig& cfg) { return model_kind_from(cfg.at("model")); }

TaskGenSpec config_task_spec(const RunConfig& cfg) {
    TaskGenSpec spec;
    const std::string& kind = cfg.at("task.kind");
    if (kind == "sinusoid") {
        SinusoidSpec s;
        s.amp_min = cfg.num("task.amp_min");
        s.amp_max = cfg.num("task.amp_max");
        s.phase_min = cfg.num("task.phase_min");
        s.phase_max = cfg.num("task.phase_max");
        s.x_min = cfg.num("task.x_min");
        s.x_max = cfg.num("task.x_max");
        s.shots = static_cast<int>(cfg.integer("task.shots"));
        s.query = static_cast<int>(cfg.integer("task.query"));
        spec.gen = s;
    } else if (kind == "classes") {
        SyntheticClassesSpec c;
        c.ways = static_cast<int>(cfg.integer("task.ways"));
        c.shots = static_cast<int>(cfg.integer("task.shots"));
        c.query_per_class = static_cast<int>(cfg.integer("task.query_per_class"));
        c.dim = static_cast<int>(cfg.integer("task.dim"));
        c.center_var = cfg.num("task.center_var");
        c.spread_var = cfg.num("task.spread_var");
        spec.gen = c;
    } else {
        spec.gen = FromFileSpec{cfg.at("task.path")};
    }
    return spec;
}

TrainConfig config_train(const RunConfig& cfg) {
    TrainConfig t;
    t.episodes = cfg.integer("train.episodes");
    t.meta_batch = static_cast<int>(cfg.integer("train.meta_batch"));
    t.lr = cfg.num("train.lr");
    t.out_scale_lr = cfg.num("train.out_scale_lr");
    t.seed = parse_u64(cfg.at("seed"), "seed");
    t.eval_every = cfg.integer("train.eval_every");
    t.eval_tasks = static_cast<int>(cfg.integer("train.eval_tasks"));
    return t;
}

MetaModel config_build_model(const RunConfig& cfg) {
    MetaModel model;
    model.kind = config_model_kind(cfg);
    const uint64_t seed = parse_u64(cfg.at("seed"), "seed");
    Rng rng(mix_seed(seed, 0x1A17ull));
    const std::vector<int> hidden = parse_int_list(cfg.at("net.hidden"), "net.hidden");
    const Activation act = activation_from(cfg.at("net.activation"));
    const bool augment = cfg.flag("net.augment");

    if (model.kind == ModelKind::GpVib) {
        VibConfig vc;
        vc.beta = cfg.num("vib.beta");
        vc.mc_samples = static_cast<int>(cfg.integer("vib.mc_samples"));
        vc.encoder = encoder_from(cfg.at("vib.encoder"));
        if (!cfg.classification) vc.log_noise_init = cfg.num("vib.log_noise_init");
        vc.kernel.type = kernel_type_from(cfg.at("kernel.type"));
        vc.kernel.v = cfg.num("kernel.v");
        const std::string& fv = cfg.at("kernel.fixed_variance");
        if (fv == "auto") {
            const int m = (hidden.empty() ? cfg.input_dim : hidden.back()) + (augment ? 1 : 0);
            vc.kernel.fixed_variance = 1.0 / m;
        } else if (fv != "none") {
            vc.kernel.fixed_variance = cfg.num("kernel.fixed_variance");
        }
        model.gpvib =
            make_gpvib_model(vc, cfg.input_dim, hidden, act, cfg.n_classes, rng, augment);
    } else {
        MamlConfig mc;
        mc.inner_lr = cfg.num("maml.inner_lr");
        mc.inner_steps_train = static_cast<int>(cfg.integer("maml.steps_train"));
        mc.inner_steps_test = static_cast<int>(cfg.integer("maml.steps_test"));
        mc.first_order = cfg.flag("maml.first_order");
        if (model.kind == ModelKind::StochasticMaml) {
            mc.beta = cfg.num("maml.beta");
            mc.s_init = cfg.num("maml.s_init");
            mc.mc_samples = static_cast<int>(cfg.integer("maml.mc_samples"));
        }
        model.maml = make_maml_model(mc, cfg.input_dim, hidden, act,
                                     model.kind == ModelKind::StochasticMaml, rng);
    }
    return model;
}

}  // namespace ibmeta
