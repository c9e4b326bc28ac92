#pragma once

#include <stdexcept>
#include <string>

namespace s2c {

// Shape disagreement between tensors (or tensor vs. config).
struct dimension_error : std::runtime_error {
    explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument value (non-positive temperature, empty vocab, ...).
struct argument_error : std::invalid_argument {
    explicit argument_error(const std::string& msg) : std::invalid_argument(msg) {}
};

// Malformed file content (WAV header, checkpoint, codes file).
struct format_error : std::runtime_error {
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: caller broke a documented protocol (double backward, stale cache).
struct contract_error : std::logic_error {
    explicit contract_error(const std::string& msg) : std::logic_error(msg) {}
};

// Out-of-range integer id (class label, vocabulary index).
struct index_error : std::out_of_range {
    explicit index_error(const std::string& msg) : std::out_of_range(msg) {}
};

// Unknown key / unparsable value in a config file or override.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace s2c
