#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "ibmeta/config.hpp"

using namespace ibmeta;

namespace {

std::string write_reg_tasks(const std::string& name) {
    Task t;
    t.kind = TaskKind::Regression;
    t.x_support = DenseMatrix(2, 2);
    t.x_support.at(0, 0) = 1.0;
    t.x_support.at(1, 1) = -2.0;
    t.y_support = {0.5, 1.5};
    t.x_query = DenseMatrix(1, 2);
    t.y_query = {0.25};
    const std::string path = testutil::tmp_dir() + "/" + name;
    save_tasks(path, {t});
    return path;
}

std::string write_cls_tasks(const std::string& name) {
    Task t;
    t.kind = TaskKind::Classification;
    t.n_classes = 3;
    t.x_support = DenseMatrix(3, 4);
    t.labels_support = {0, 1, 2};
    t.x_query = DenseMatrix(3, 4);
    t.labels_query = {2, 1, 0};
    const std::string path = testutil::tmp_dir() + "/" + name;
    save_tasks(path, {t});
    return path;
}

}  // namespace

TEST_CASE("flat config parsing handles comments, blanks, and repeats") {
    const FlatConfig cfg = parse_flat_config(
        "# full-line comment\n"
        "model = maml\n"
        "\n"
        "train.lr = 0.01  # trailing note\n"
        "model = gpvib\n"
        "note = two words\n");
    CHECK(cfg.size() == 3);
    CHECK(cfg.at("model") == "gpvib");  // last occurrence wins
    CHECK(cfg.at("train.lr") == "0.01");
    CHECK(cfg.at("note") == "two words");
}

TEST_CASE("flat config parsing reports the offending line") {
    try {
        parse_flat_config("a = 1\nnot a pair\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line == 2);
        CHECK(std::string(e.what()).find("key=value") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_flat_config("= 3\n"), ParseError);
    CHECK_THROWS_AS(load_flat_config(testutil::tmp_dir() + "/no_such.cfg"), ConfigError);
}

TEST_CASE("an empty config resolves to the regression defaults") {
    const RunConfig cfg = resolve_config({});
    CHECK(cfg.at("model") == "gpvib");
    CHECK(cfg.at("task.kind") == "sinusoid");
    CHECK(cfg.at("seed") == "0");
    CHECK(cfg.integer("task.shots") == 10);
    CHECK(cfg.integer("task.query") == 50);
    CHECK(cfg.num("task.amp_min") == 0.1);
    CHECK(cfg.num("task.amp_max") == 5.0);
    CHECK(cfg.integer("train.episodes") == 20000);
    CHECK(cfg.integer("train.meta_batch") == 5);
    CHECK(cfg.num("train.lr") == 0.001);
    CHECK(cfg.num("train.out_scale_lr") == 0.0001);
    CHECK(cfg.at("net.hidden") == "40,40");
    CHECK(cfg.at("net.activation") == "relu");
    CHECK(cfg.at("vib.beta") == "1");
    CHECK(cfg.at("vib.encoder") == "exact-posterior");
    CHECK(cfg.at("kernel.type") == "linear");
    CHECK(cfg.at("kernel.fixed_variance") == "auto");
    CHECK(cfg.values.count("vib.log_noise_init") == 1);
    CHECK_FALSE(cfg.classification);
    CHECK(cfg.n_classes == 0);
    CHECK(cfg.input_dim == 1);
}

TEST_CASE("classification defaults differ where the run families diverge") {
    const RunConfig cfg = resolve_config({{"task.kind", "classes"}});
    CHECK(cfg.classification);
    CHECK(cfg.n_classes == 5);
    CHECK(cfg.input_dim == 16);
    CHECK(cfg.integer("train.meta_batch") == 4);
    CHECK(cfg.at("vib.beta") == "0.001");
    CHECK(cfg.at("vib.encoder") == "simplified");
    CHECK(cfg.at("kernel.type") == "cosine");
    CHECK(cfg.at("kernel.fixed_variance") == "none");
    CHECK(cfg.at("net.hidden") == "64,64");
    CHECK(cfg.values.count("vib.log_noise_init") == 0);  // no noise parameter without regression
}

TEST_CASE("unknown and inapplicable keys are rejected by name") {
    try {
        resolve_config({{"betaa", "1"}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key == "betaa");
        CHECK(std::string(e.what()).find("betaa") != std::string::npos);
    }
    // keys belonging to the other model family are unknown, not ignored
    CHECK_THROWS_AS(resolve_config({{"maml.inner_lr", "0.1"}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"model", "maml"}, {"vib.beta", "1"}}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"model", "maml"}, {"maml.s_init", "0.1"}}), ConfigError);
    try {
        resolve_config({{"model", "maml"}, {"vib.beta", "1"}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key == "vib.beta");
    }
}

TEST_CASE("value validation names the offending key") {
    auto key_of = [](const FlatConfig& raw) {
        try {
            resolve_config(raw);
            return std::string("<resolved>");
        } catch (const ConfigError& e) {
            return e.key;
        }
    };
    CHECK(key_of({{"train.lr", "abc"}}) == "train.lr");
    CHECK(key_of({{"train.lr", "0"}}) == "train.lr");
    CHECK(key_of({{"train.episodes", "0"}}) == "train.episodes");
    CHECK(key_of({{"task.shots", "0"}}) == "task.shots");
    CHECK(key_of({{"task.amp_min", "6"}}) == "task.amp_min");
    CHECK(key_of({{"task.x_min", "5"}, {"task.x_max", "5"}}) == "task.x_min");
    CHECK(key_of({{"task.kind", "classes"}, {"task.ways", "1"}}) == "task.ways");
    CHECK(key_of({{"vib.encoder", "bogus"}}) == "vib.encoder");
    CHECK(key_of({{"net.hidden", "64,,64"}}) == "net.hidden");
    CHECK(key_of({{"net.hidden", "0"}}) == "net.hidden");
    CHECK(key_of({{"net.augment", "maybe"}}) == "net.augment");
    CHECK(key_of({{"kernel.type", "rbf"}}) == "kernel.type");
    CHECK(key_of({{"kernel.fixed_variance", "-1"}}) == "kernel.fixed_variance");
    CHECK(key_of({{"model", "nope"}}) == "model");
    CHECK(key_of({{"task.kind", "images"}}) == "task.kind");
    CHECK(key_of({{"seed", "12x"}}) == "seed");
    // combinations ruled out at resolve time
    CHECK(key_of({{"task.kind", "classes"}, {"vib.encoder", "exact-posterior"}}) == "vib.encoder");
    CHECK(key_of({{"task.kind", "classes"}, {"model", "maml"}}) == "model");
}

TEST_CASE("the full unsigned seed range survives the round trip") {
    const RunConfig cfg = resolve_config({{"seed", "18446744073709551615"}});
    CHECK(config_train(cfg).seed == UINT64_MAX);
}

TEST_CASE("dump_config emits sorted key=value lines") {
    FlatConfig v;
    v["b"] = "2";
    v["a"] = "1";
    v["c.d"] = "x y";
    CHECK(dump_config(v) == "a=1\nb=2\nc.d=x y\n");
}

TEST_CASE("a resolved config re-parsed resolves to itself") {
    const FlatConfig raw = {{"model", "smaml"},
                            {"train.episodes", "7"},
                            {"maml.inner_lr", "0.02"},
                            {"seed", "42"}};
    const RunConfig first = resolve_config(raw);
    const std::string dumped = dump_config(first.values);
    const RunConfig second = resolve_config(parse_flat_config(dumped));
    CHECK(second.values == first.values);
    CHECK(dump_config(second.values) == dumped);
}

TEST_CASE("task specs are built from the resolved values") {
    const RunConfig sin = resolve_config(
        {{"task.shots", "3"}, {"task.query", "7"}, {"task.amp_max", "2.5"}});
    const TaskGenSpec sin_spec = config_task_spec(sin);
    const auto& s = std::get<SinusoidSpec>(sin_spec.gen);
    CHECK(s.shots == 3);
    CHECK(s.query == 7);
    CHECK(s.amp_max == 2.5);
    CHECK(s.amp_min == 0.1);

    const RunConfig cls = resolve_config(
        {{"task.kind", "classes"}, {"task.ways", "3"}, {"task.dim", "6"}});
    const TaskGenSpec cls_spec = config_task_spec(cls);
    const auto& c = std::get<SyntheticClassesSpec>(cls_spec.gen);
    CHECK(c.ways == 3);
    CHECK(c.dim == 6);
    CHECK(c.query_per_class == 15);
}

TEST_CASE("file-backed tasks are probed for their data kind") {
    const std::string reg = write_reg_tasks("cfg_reg.tasks");
    const RunConfig r = resolve_config({{"task.kind", "file"}, {"task.path", reg}});
    CHECK_FALSE(r.classification);
    CHECK(r.input_dim == 2);
    CHECK(std::get<FromFileSpec>(config_task_spec(r).gen).path == reg);

    const std::string cls = write_cls_tasks("cfg_cls.tasks");
    const RunConfig c = resolve_config({{"task.kind", "file"}, {"task.path", cls}});
    CHECK(c.classification);
    CHECK(c.n_classes == 3);
    CHECK(c.input_dim == 4);

    CHECK_THROWS_AS(resolve_config({{"task.kind", "file"}}), ConfigError);
    CHECK_THROWS_AS(
        resolve_config({{"task.kind", "file"}, {"task.path", testutil::tmp_dir() + "/nope"}}),
        ParseError);
}

TEST_CASE("train settings map onto the trainer config") {
    const RunConfig cfg = resolve_config({{"train.episodes", "123"},
                                          {"train.meta_batch", "3"},
                                          {"train.lr", "0.25"},
                                          {"train.out_scale_lr", "0.5"},
                                          {"train.eval_every", "11"},
                                          {"train.eval_tasks", "9"},
                                          {"seed", "77"}});
    const TrainConfig t = config_train(cfg);
    CHECK(t.episodes == 123);
    CHECK(t.meta_batch == 3);
    CHECK(t.lr == 0.25);
    CHECK(t.out_scale_lr == 0.5);
    CHECK(t.eval_every == 11);
    CHECK(t.eval_tasks == 9);
    CHECK(t.seed == 77);
}

TEST_CASE("models are built to the resolved description") {
    SUBCASE("regression gpvib defaults") {
        const RunConfig cfg = resolve_config({});
        const MetaModel m = config_build_model(cfg);
        CHECK(m.kind == ModelKind::GpVib);
        CHECK(m.is_regression());
        CHECK(m.gpvib.params.has("lik.log_noise"));
        // fixed variance "auto" pins the kernel scale to 1/M, so v is not learned
        REQUIRE(m.gpvib.cfg.kernel.fixed_variance.has_value());
        CHECK(*m.gpvib.cfg.kernel.fixed_variance == 1.0 / 41.0);
        CHECK_FALSE(m.gpvib.params.has("kernel.v"));
        CHECK(m.gpvib.net.feature_dim() == 41);
    }
    SUBCASE("learned kernel scale when fixed variance is none") {
        const RunConfig cfg = resolve_config({{"kernel.fixed_variance", "none"}});
        const MetaModel m = config_build_model(cfg);
        CHECK(m.gpvib.params.has("kernel.v"));
        CHECK_FALSE(m.gpvib.cfg.kernel.fixed_variance.has_value());
    }
    SUBCASE("classification gpvib") {
        const RunConfig cfg = resolve_config({{"task.kind", "classes"}});
        const MetaModel m = config_build_model(cfg);
        CHECK_FALSE(m.is_regression());
        CHECK(m.gpvib.n_classes == 5);
        CHECK_FALSE(m.gpvib.params.has("lik.log_noise"));
        CHECK(m.gpvib.params.has("enc.m_tilde"));
        CHECK(m.gpvib.cfg.kernel.type == KernelSpec::Type::Cosine);
    }
    SUBCASE("maml and its stochastic variant") {
        const MetaModel m = config_build_model(resolve_config({{"model", "maml"}}));
        CHECK(m.kind == ModelKind::Maml);
        CHECK(m.maml.params.has("maml.out_w"));
        CHECK_FALSE(m.maml.params.has("smaml.s.maml.out_w"));

        const MetaModel s = config_build_model(resolve_config(
            {{"model", "smaml"}, {"maml.s_init", "0.01"}, {"maml.mc_samples", "3"}}));
        CHECK(s.kind == ModelKind::StochasticMaml);
        CHECK(s.maml.params.has("smaml.s.maml.out_w"));
        CHECK(s.maml.cfg.s_init == 0.01);
        CHECK(s.maml.cfg.mc_samples == 3);
    }
    SUBCASE("initialization is a pure function of the seed") {
        const RunConfig a = resolve_config({{"seed", "5"}});
        const RunConfig b = resolve_config({{"seed", "6"}});
        CHECK(config_build_model(a).params().flatten() == config_build_model(a).params().flatten());
        CHECK(config_build_model(a).params().flatten() != config_build_model(b).params().flatten());
    }
}

TEST_CASE("run config accessors validate on use") {
    const RunConfig cfg = resolve_config({});
    CHECK_THROWS_AS(cfg.at("no.such.key"), ConfigError);
    CHECK_THROWS_AS(cfg.integer("net.hidden"), ConfigError);  // "40,40" is not one integer
    CHECK(cfg.flag("net.augment") == true);
}
