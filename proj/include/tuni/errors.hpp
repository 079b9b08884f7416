#pragma once

#include <stdexcept>
#include <string>

namespace tuni {

/// Shape or axis mismatch between operands.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A call violated an API precondition (non-scalar loss, repeated backward, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid model or training configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A NaN or Inf was produced; surfaced instead of propagated.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File or stream level failure (parse errors carry a byte offset in the message).
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace tuni
