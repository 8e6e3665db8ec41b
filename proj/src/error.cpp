#include "histovit/error.hpp"

namespace histovit {

std::string_view to_string(ErrorCategory cat) {
    switch (cat) {
        case ErrorCategory::shape: return "shape";
        case ErrorCategory::numeric: return "numeric";
        case ErrorCategory::label: return "label";
        case ErrorCategory::config: return "config";
        case ErrorCategory::parse: return "parse";
        case ErrorCategory::integrity: return "integrity";
        case ErrorCategory::balance: return "balance";
        case ErrorCategory::split: return "split";
        case ErrorCategory::io: return "io";
        case ErrorCategory::decode: return "decode";
        case ErrorCategory::checkpoint: return "checkpoint";
        case ErrorCategory::teacher: return "teacher";
        case ErrorCategory::input: return "input";
        case ErrorCategory::alignment: return "alignment";
        case ErrorCategory::arity: return "arity";
        case ErrorCategory::state: return "state";
        case ErrorCategory::training: return "training";
        case ErrorCategory::usage: return "usage";
    }
    return "unknown";
}

Error::Error(ErrorCategory cat, const std::string& message)
    : std::runtime_error(std::string(to_string(cat)) + " error: " + message), cat_(cat) {}

}  // namespace histovit
