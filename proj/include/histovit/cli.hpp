#pragma once

namespace histovit::cli {

// Entry point behind the histovit binary; callable in-process by tests.
// Exit codes: 0 success, 1 domain error, 2 usage error.
int run(int argc, const char* const* argv);

}  // namespace histovit::cli
