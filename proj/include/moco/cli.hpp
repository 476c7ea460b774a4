#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace moco {

inline constexpr int kExitOk = 0;
inline constexpr int kExitContract = 1;
inline constexpr int kExitIo = 2;

// Runs one command line (without the program name). Errors are reported on
// `err` as a single "error: ..." line.
int dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace moco
