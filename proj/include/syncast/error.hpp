#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace syncast {

enum class ErrorCode {
    InvalidGrid,
    InvalidRegion,
    InvalidValue,
    InvalidStats,
    InvalidConfig,
    MagicMismatch,
    TruncatedPayload,
    HeaderMismatch,
    ChecksumMismatch,
    Io,
    Shape,
    Alignment,
    NumericFailure,
    TrainingDiverged,
    FrozenViolation,
    Index,
    SamplingFailure,
    InsufficientData,
    DivisionByZero,
    UndefinedRate,
    EmptyDataset,
};

const char* to_string(ErrorCode code);

/// Single exception type for the library. `index()` carries the offending
/// layer, step, or bucket when the error is tied to one.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what, std::optional<long> index = std::nullopt)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), index_(index) {}

    ErrorCode code() const noexcept { return code_; }
    std::optional<long> index() const noexcept { return index_; }

private:
    ErrorCode code_;
    std::optional<long> index_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what,
                              std::optional<long> index = std::nullopt) {
    throw Error(code, what, index);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

}  // namespace syncast
