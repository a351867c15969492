#pragma once

#include <stdexcept>
#include <string>

namespace brainwash {

// Bad input: configs, shapes, out-of-range arguments. Maps to CLI exit code 2.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Failure while executing a valid request (I/O, non-finite loss, ...). Exit code 3.
class RuntimeFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define BRAINWASH_REQUIRE(cond, msg)                                  \
    do {                                                              \
        if (!(cond)) throw ::brainwash::ValidationError(std::string(msg)); \
    } while (0)

}  // namespace brainwash
