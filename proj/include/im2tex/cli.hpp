#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace im2tex::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;
inline constexpr int kVerifyFailed = 3;
inline constexpr int kDiverged = 4;

// args[0] is the program name. Normal output goes to `out`, diagnostics and
// usage errors to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace im2tex::cli
