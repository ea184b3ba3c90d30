#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace psam::cli {

// Exit codes shared by every command.
inline constexpr int kOk = 0;
inline constexpr int kCheckFailed = 1;  // gradcheck above threshold
inline constexpr int kUsage = 2;        // bad flags or failed validation
inline constexpr int kRuntime = 3;      // I/O or numeric failure

// Runs one command. `args` excludes the program name, e.g. {"gen-data", "--n", "200", "--out", "d"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace psam::cli
