#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace histovit {

// Error categories surfaced through the CLI exit diagnostics and asserted on
// by tests. One category per failure family, not per call site.
enum class ErrorCategory {
    shape,
    numeric,
    label,
    config,
    parse,
    integrity,
    balance,
    split,
    io,
    decode,
    checkpoint,
    teacher,
    input,
    alignment,
    arity,
    state,
    training,
    usage,
};

std::string_view to_string(ErrorCategory cat);

class Error : public std::runtime_error {
  public:
    Error(ErrorCategory cat, const std::string& message);

    ErrorCategory category() const { return cat_; }

  private:
    ErrorCategory cat_;
};

}  // namespace histovit
