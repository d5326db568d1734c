#pragma once

namespace fmalloc {

// Entry point shared by the fmalloc binary and the CLI tests.
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.
int cli_main(int argc, const char* const* argv);

}  // namespace fmalloc
