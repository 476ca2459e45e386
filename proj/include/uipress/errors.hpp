#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace uipress {

// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid configuration (non-square K, indivisible groups, ...).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or out-of-range input data (ids, files, annotations).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf encountered during training or evaluation.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Misuse of the autodiff tape (backward without a recorded graph, ...).
class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

template <typename Dims>
std::string format_shape(const Dims& dims) {
    std::ostringstream os;
    os << '[';
    bool first = true;
    for (auto d : dims) {
        if (!first) {
            os << 'x';
        }
        os << d;
        first = false;
    }
    os << ']';
    return os.str();
}

}  // namespace detail

}  // namespace uipress
