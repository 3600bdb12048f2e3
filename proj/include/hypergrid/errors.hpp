#pragma once

#include <stdexcept>
#include <string>

namespace hgrid {

/// Tensor shapes or ranks do not fit the operation.
class ShapeError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// A configuration value or combination is invalid. Raised before any work starts.
class ConfigError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

/// A checkpoint or data file is malformed or does not match the model.
class FormatError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// A non-finite value appeared in a loss, activation or parameter.
class NumericError : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

}  // namespace hgrid
