#pragma once

#include <stdexcept>
#include <string>

namespace seqcl {

/// Operand extents do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A documented precondition of an operation was violated at runtime.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Index outside a lookup table or vocabulary.
class LookupError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// NaN/Inf in a loss or gradient, or a degenerate normalizer.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad user configuration (maps to exit code 2 in the CLI).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Sequence longer than the model's positional capacity.
class CapacityError : public std::length_error {
public:
    using std::length_error::length_error;
};

/// Malformed or unreadable on-disk container.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A file or directory could not be created or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace seqcl
