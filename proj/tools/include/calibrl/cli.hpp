#pragma once

// The `calibrl` command line, as a library so tests can drive it in-process.
//
//   calibrl [--seed N] [--quiet] <subcommand> ...
//
//   train         --config FILE --mode MODE --out DIR [--set key=value]...
//   sweep         --config FILE --axis AXIS --values v1,v2,... --out DIR
//                 [--mode MODE] [--parallel N] [--set key=value]...
//   check         [--json]
//   rarity-curve  [--G N] [--out FILE]
//   eval          --checkpoint FILE --tasks FILE [--config FILE] [--set key=value]...
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <iosfwd>
#include <string>
#include <vector>

namespace calibrl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Axes accepted by `sweep`.
const std::vector<std::string>& sweep_axes();

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

} // namespace calibrl::cli
