#pragma once

#include <iosfwd>

namespace dsnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the dsnet tool. Writes human-readable output to `out` and
/// diagnostics to `err`; returns 0 on success, 1 on runtime failure and 2 on
/// usage or configuration errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dsnet::cli
