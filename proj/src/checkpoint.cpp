#include "ibmeta/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace ibmeta {

namespace {

using Json = nlohmann::ordered_json;

Json params_to_json(const ad::ParamSet& ps) {
    Json out = Json::object();
    for (int i = 0; i < ps.count(); ++i) {
        const auto& e = ps.entry(i);
        out[e.name] = Json{{"rows", e.rows}, {"cols", e.cols}, {"data", e.value}};
    }
    return out;
}

// The architecture is rebuilt first; stored tensors must match it exactly.
void fill_params(ad::ParamSet& ps, const Json& jp) {
    if (!jp.is_object()) throw ConfigError("checkpoint params must be an object", "params");
    if (static_cast<int>(jp.size()) != ps.count())
        throw ConfigError("checkpoint parameter set does not match the architecture", "params");
    for (int i = 0; i < ps.count(); ++i) {
        auto& e = ps.entry(i);
        const auto it = jp.find(e.name);
        if (it == jp.end()) throw ConfigError("checkpoint is missing parameter", e.name);
        if (it->at("rows").get<int>() != e.rows || it->at("cols").get<int>() != e.cols)
            throw ConfigError("checkpoint parameter shape mismatch", e.name);
        auto data = it->at("data").get<std::vector<double>>();
        if (data.size() != e.value.size())
            throw ConfigError("checkpoint parameter size mismatch", e.name);
        e.value = std::move(data);
    }
}

}  // namespace

std::string checkpoint_to_json(const MetaModel& model, const FlatConfig& run_config) {
    Json j;
    j["format"] = "ibmeta-checkpoint";
    j["version"] = 1;
    j["model"] = to_string(model.kind);
    const FeatureNet& net = model.kind == ModelKind::GpVib ? model.gpvib.net : model.maml.net;
    j["net"] = Json{{"input_dim", net.input_dim},
                    {"hidden", net.hidden},
                    {"activation", to_string(net.activation)},
                    {"augment", net.augment_bias}};
    if (model.kind == ModelKind::GpVib) {
        const VibConfig& vc = model.gpvib.cfg;
        j["vib"] = Json{{"beta", vc.beta},
                        {"mc_samples", vc.mc_samples},
                        {"encoder", to_string(vc.encoder)},
                        {"log_noise_init", vc.log_noise_init}};
        Json k = Json{{"type", to_string(vc.kernel.type)}, {"v", vc.kernel.v}};
        if (vc.kernel.fixed_variance)
            k["fixed_variance"] = *vc.kernel.fixed_variance;
        else
            k["fixed_variance"] = nullptr;
        j["kernel"] = k;
        j["n_classes"] = model.gpvib.n_classes;
    } else {
        const MamlConfig& mc = model.maml.cfg;
        j["maml"] = Json{{"inner_lr", mc.inner_lr},
                         {"steps_train", mc.inner_steps_train},
                         {"steps_test", mc.inner_steps_test},
                         {"first_order", mc.first_order},
                         {"beta", mc.beta},
                         {"s_init", mc.s_init},
                         {"mc_samples", mc.mc_samples}};
    }
    j["params"] = params_to_json(model.params());
    Json rc = Json::object();
    for (const auto& [key, value] : run_config) rc[key] = value;
    j["run_config"] = rc;
    return j.dump(2) + "\n";
}

LoadedCheckpoint checkpoint_from_json(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const std::exception& ex) {
        throw ConfigError(std::string("checkpoint is not valid JSON: ") + ex.what(), "checkpoint");
    }
    try {
        if (!j.contains("format") || j.at("format").get<std::string>() != "ibmeta-checkpoint")
            throw ConfigError("not a checkpoint file", "format");
        if (j.at("version").get<int>() != 1)
            throw ConfigError("unsupported checkpoint version", "version");

        LoadedCheckpoint out;
        out.model.kind = model_kind_from(j.at("model").get<std::string>());
        const Json& jn = j.at("net");
        const int input_dim = jn.at("input_dim").get<int>();
        const auto hidden = jn.at("hidden").get<std::vector<int>>();
        const Activation act = activation_from(jn.at("activation").get<std::string>());
        const bool augment = jn.at("augment").get<bool>();
        Rng rng(0);  // initialization is overwritten below

        if (out.model.kind == ModelKind::GpVib) {
            const Json& jv = j.at("vib");
            VibConfig vc;
            vc.beta = jv.at("beta").get<double>();
            vc.mc_samples = jv.at("mc_samples").get<int>();
            vc.encoder = encoder_from(jv.at("encoder").get<std::string>());
            vc.log_noise_init = jv.at("log_noise_init").get<double>();
            const Json& jk = j.at("kernel");
            vc.kernel.type = kernel_type_from(jk.at("type").get<std::string>());
            vc.kernel.v = jk.at("v").get<double>();
            if (!jk.at("fixed_variance").is_null())
                vc.kernel.fixed_variance = jk.at("fixed_variance").get<double>();
            out.model.gpvib = make_gpvib_model(vc, input_dim, hidden, act,
                                               j.at("n_classes").get<int>(), rng, augment);
        } else {
            const Json& jm = j.at("maml");
            MamlConfig mc;
            mc.inner_lr = jm.at("inner_lr").get<double>();
            mc.inner_steps_train = jm.at("steps_train").get<int>();
            mc.inner_steps_test = jm.at("steps_test").get<int>();
            mc.first_order = jm.at("first_order").get<bool>();
            mc.beta = jm.at("beta").get<double>();
            mc.s_init = jm.at("s_init").get<double>();
            mc.mc_samples = jm.at("mc_samples").get<int>();
            out.model.maml = make_maml_model(mc, input_dim, hidden, act,
                                             out.model.kind == ModelKind::StochasticMaml, rng);
        }
        fill_params(out.model.params(), j.at("params"));
        if (j.contains("run_config"))
            for (const auto& [key, value] : j.at("run_config").items())
                out.run_config[key] = value.get<std::string>();
        return out;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& ex) {
        throw ConfigError(std::string("malformed checkpoint: ") + ex.what(), "checkpoint");
    }
}

void save_checkpoint(const std::string& path, const MetaModel& model,
                     const FlatConfig& run_config) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open checkpoint for writing", path);
    out << checkpoint_to_json(model, run_config);
    if (!out) throw ConfigError("failed writing checkpoint", path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint", path);
    std::stringstream buf;
    buf << in.rdbuf();
    return checkpoint_from_json(buf.str());
}

}  // namespace ibmeta
