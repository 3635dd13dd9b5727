#pragma once

#include <stdexcept>
#include <string>

namespace dtl {

// Shape of an operand does not conform to the operation.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A documented precondition was violated by the caller.
struct ContractViolation : std::runtime_error {
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidLabelError : std::runtime_error {
    explicit InvalidLabelError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingHeadError : std::runtime_error {
    explicit MissingHeadError(const std::string& msg) : std::runtime_error(msg) {}
};

// A gradient that must be nonzero collapsed to zero (NGC cosine, A-GEM projection).
struct DegenerateGradientError : std::runtime_error {
    explicit DegenerateGradientError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training left the finite regime; message names the offending stage/step.
struct DivergedRunError : std::runtime_error {
    explicit DivergedRunError(const std::string& msg) : std::runtime_error(msg) {}
};

// A simulated worker died mid-schedule.
struct AbortedComputationError : std::runtime_error {
    explicit AbortedComputationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dtl
