#pragma once

#include <stdexcept>
#include <string>

namespace relectra {

// Error taxonomy. The CLI maps these onto exit codes: usage errors -> 1,
// configuration/data errors -> 2, numeric failures -> 3.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct LengthError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct AnnotationError : Error {
    using Error::Error;
};
struct CoverageError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};

}  // namespace relectra
