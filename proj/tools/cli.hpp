#pragma once

#include <ostream>

namespace rpdac {

/// Entry point of the `rpdac` tool. Exit codes: 0 success, 1 usage error,
/// 2 runtime failure.
int cliMain(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rpdac
