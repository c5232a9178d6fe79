#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace fencepipe::cli {

/// Exit statuses; stable across releases.
inline constexpr int kExitOk = 0;
inline constexpr int kExitData = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command. `args` excludes the program name, e.g.
/// {"split", "--manifest", "d/manifest.json", "--frac", "0.8,0.1,0.1"}.
/// The JSON result goes to `out`, diagnostics to `err`.
/// FENCEPIPE_SEED, when set, replaces the default seed of every command;
/// an explicit --seed still wins.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fencepipe::cli
