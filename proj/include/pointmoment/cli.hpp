#pragma once

#include <ostream>

namespace pointmoment::cli {

// Exit codes: 0 success, 1 bad usage or config, 2 data or file format error,
// 3 verification failure, 4 numerical failure during training.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitVerification = 3;
inline constexpr int kExitNumeric = 4;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pointmoment::cli
