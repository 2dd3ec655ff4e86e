#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace s2vc::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";
/// Output root used when a command is run without --out.
inline constexpr const char* kOutputRootEnv = "S2VC_OUTPUT_ROOT";
inline constexpr const char* kRunManifestName = "run.json";
inline constexpr const char* kResolvedConfigName = "resolved.ini";

/// Parses and executes one subcommand. Progress goes to `out`; failures are
/// reported on `err` as a single "error: ..." line. Returns the exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace s2vc::cli
