#pragma once

// `nullswap <command>`: gen-data, train, cloak, eval-visual, eval-id,
// eval-swap and report. Exit status 0 on success, 1 on a runtime failure,
// 2 on a usage error.

#include <iosfwd>

namespace nullswap {

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace nullswap
