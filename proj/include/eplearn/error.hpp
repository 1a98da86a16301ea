#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eplearn {

enum class ErrorCode {
    EmptyData,
    NonBinaryTreatment,
    NonFiniteValue,
    NonFiniteLoss,
    SingularDesign,
    NoConvergence,
    KTooLarge,
    BadFoldCount,
    DegenerateRange,
    MethodOutcomeMismatch,
    ZeroWeightDivision,
    AllZeroWeights,
    DimensionMismatch,
    InvalidConfig,
    Unsupported,
    ParseError,
    IOError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::EmptyData: return "EmptyData";
    case ErrorCode::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::SingularDesign: return "SingularDesign";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::BadFoldCount: return "BadFoldCount";
    case ErrorCode::DegenerateRange: return "DegenerateRange";
    case ErrorCode::MethodOutcomeMismatch: return "MethodOutcomeMismatch";
    case ErrorCode::ZeroWeightDivision: return "ZeroWeightDivision";
    case ErrorCode::AllZeroWeights: return "AllZeroWeights";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IOError: return "IOError";
    }
    return "Unknown";
}

/// Library-wide exception. The code is stable and machine readable; the
/// message carries context such as row numbers, fold indices or file paths.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace eplearn
