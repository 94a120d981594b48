#pragma once

#include <string>

#include "ibmeta/config.hpp"
#include "ibmeta/trainer.hpp"

namespace ibmeta {

// Versioned JSON checkpoint: model kind, architecture, configuration,
// parameter tensors, and the resolved run configuration that produced the
// model (so downstream commands can rebuild the task generator).
void save_checkpoint(const std::string& path, const MetaModel& model,
                     const FlatConfig& run_config);

struct LoadedCheckpoint {
    MetaModel model;
    FlatConfig run_config;
};

// Throws ConfigError on a missing file, wrong format tag, unsupported
// version, or parameter tensors that disagree with the architecture.
LoadedCheckpoint load_checkpoint(const std::string& path);

std::string checkpoint_to_json(const MetaModel& model, const FlatConfig& run_config);
LoadedCheckpoint checkpoint_from_json(const std::string& text);

}  // namespace ibmeta
