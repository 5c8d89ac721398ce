#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace knobs {

enum class ErrorCode {
  parse,
  empty_corpus,
  empty_tags,
  config,
  missing_input,
  incompatible_dims,
  training,
  degenerate_profile,
  no_segment,
  contract,
  format,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::parse: return "parse_error";
    case ErrorCode::empty_corpus: return "empty_corpus";
    case ErrorCode::empty_tags: return "empty_tag_table";
    case ErrorCode::config: return "configuration_error";
    case ErrorCode::missing_input: return "missing_input";
    case ErrorCode::incompatible_dims: return "incompatible_dimensions";
    case ErrorCode::training: return "training_error";
    case ErrorCode::degenerate_profile: return "degenerate_profile";
    case ErrorCode::no_segment: return "no_segment";
    case ErrorCode::contract: return "contract_violation";
    case ErrorCode::format: return "format_error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace knobs
