#pragma once

#include <map>
#include <string>

#include "ibmeta/trainer.hpp"

namespace ibmeta {

// Flat key=value document; std::map keeps dumps sorted and stable.
using FlatConfig = std::map<std::string, std::string>;

// Syntax-level parse: one "key = value" per line, '#' starts a comment,
// blank lines are skipped, the last occurrence of a repeated key wins.
FlatConfig parse_flat_config(const std::string& text);
FlatConfig load_flat_config(const std::string& path);

// A validated, fully-defaulted run description. `values` holds every key
// the run consumes, verbatim where the user supplied one; dumping and
// re-parsing it reproduces the identical run.
struct RunConfig {
    FlatConfig values;
    bool classification = false;
    int n_classes = 0;  // 0 for regression
    int input_dim = 1;

    const std::string& at(const std::string& key) const;
    double num(const std::string& key) const;
    long long integer(const std::string& key) const;
    bool flag(const std::string& key) const;
};

// Fills defaults for the chosen model and task family, validates every
// key (unknown or inapplicable keys raise ConfigError naming the key), and
// probes file-backed task specs for their data kind.
RunConfig resolve_config(const FlatConfig& raw);

// Sorted "key=value" lines, newline-terminated; the config.resolved format.
std::string dump_config(const FlatConfig& values);

ModelKind config_model_kind(const RunConfig& cfg);
TaskGenSpec config_task_spec(const RunConfig& cfg);
TrainConfig config_train(const RunConfig& cfg);
// Builds the model with its initialization stream derived from the seed.
MetaModel config_build_model(const RunConfig& cfg);

std::string to_string(ModelKind k);
std::string to_string(EncoderKind k);
std::string to_string(KernelSpec::Type t);
std::string to_string(Activation a);
ModelKind model_kind_from(const std::string& s);
EncoderKind encoder_from(const std::string& s);
KernelSpec::Type kernel_type_from(const std::string& s);
Activation activation_from(const std::string& s);

}  // namespace ibmeta
