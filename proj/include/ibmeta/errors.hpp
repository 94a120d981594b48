#pragma once

#include <stdexcept>
#include <string>

namespace ibmeta {

struct NotPositiveDefinite : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NonFiniteGradient : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteValue : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroFeatureVector : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Streaming prediction is derived for linear features only.
struct StreamingUnsupported : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    int line;
    std::string field;
    ParseError(const std::string& msg, int line_no, std::string field_name = "")
        : std::runtime_error(msg + " (line " + std::to_string(line_no) +
                             (field_name.empty() ? "" : ", field '" + field_name + "'") + ")"),
          line(line_no),
          field(std::move(field_name)) {}
};

struct ConfigError : std::runtime_error {
    std::string key;
    ConfigError(const std::string& msg, std::string key_name = "")
        : std::runtime_error(key_name.empty() ? msg : msg + ": '" + key_name + "'"),
          key(std::move(key_name)) {}
};

}  // namespace ibmeta
