#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmgen {

enum class ErrorCode {
  kInputShape,
  kNumericInput,
  kTokenRange,
  kTokenization,
  kParse,
  kDivergence,
  kEmptyLoss,
  kConfig,
  kIo,
  kVersion,
  kChecksum,
  kTruncated,
  kSectionMissing,
  kDecodeStuck,
  kPromptTooLong,
  kLayoutMismatch,
  kManifest,
  kUsage,
};

std::string_view error_code_name(ErrorCode code);

// Every failure in the library surfaces as this exception. `context` carries
// the machine-readable detail (offending position, file, step index...).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message, std::string context = {});

  ErrorCode code() const { return code_; }
  const std::string& message() const { return message_; }
  const std::string& context() const { return context_; }

  // Single line: error code=<name> message="..." context="..."
  std::string one_line() const;

 private:
  ErrorCode code_;
  std::string message_;
  std::string context_;
};

}  // namespace mmgen
