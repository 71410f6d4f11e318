#include "mmgen/error.hpp"

namespace mmgen {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInputShape: return "input_shape";
    case ErrorCode::kNumericInput: return "numeric_input";
    case ErrorCode::kTokenRange: return "token_range";
    case ErrorCode::kTokenization: return "tokenization";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kEmptyLoss: return "empty_loss";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kSectionMissing: return "section_missing";
    case ErrorCode::kDecodeStuck: return "decode_stuck";
    case ErrorCode::kPromptTooLong: return "prompt_too_long";
    case ErrorCode::kLayoutMismatch: return "layout_mismatch";
    case ErrorCode::kManifest: return "manifest";
    case ErrorCode::kUsage: return "usage";
  }
  return "unknown";
}

namespace {

std::string compose_what(ErrorCode code, const std::string& message,
                         const std::string& context) {
  std::string out(error_code_name(code));
  out += ": ";
  out += message;
  if (!context.empty()) {
    out += " (";
    out += context;
    out += ")";
  }
  return out;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

Error::Error(ErrorCode code, std::string message, std::string context)
    : std::runtime_error(compose_what(code, message, context)),
      code_(code),
      message_(std::move(message)),
      context_(std::move(context)) {}

std::string Error::one_line() const {
  return "error code=" + std::string(error_code_name(code_)) +
         " message=" + quoted(message_) + " context=" + quoted(context_);
}

}  // namespace mmgen
