#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace speckle {

enum class ErrorCode {
  kInvalidArgument,
  kDimensionMismatch,
  kOutOfBounds,
  kSingularSystem,
  kNonFinite,
  kDivergence,
  kBadMagic,
  kUnsupportedVersion,
  kCrcMismatch,
  kDimensionOverflow,
  kIo,
  kParse,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kOutOfBounds: return "out of bounds";
    case ErrorCode::kSingularSystem: return "singular system";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kUnsupportedVersion: return "unsupported version";
    case ErrorCode::kCrcMismatch: return "crc mismatch";
    case ErrorCode::kDimensionOverflow: return "dimension overflow";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kParse: return "parse error";
  }
  return "unknown";
}

// All library failures are reported as speckle::Error; code() lets callers
// (the CLI in particular) map failures onto exit codes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace speckle
