#pragma once

#include <ostream>

namespace dynfuse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `dynfuse` binary. Tables go to `out`, diagnostics and
// usage text to `err`; machine-readable artifacts are written under --out.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dynfuse
