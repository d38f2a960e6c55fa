#pragma once

#include <iosfwd>

namespace kpconv {

/// Command-line entry point. Returns 0 on success, 2 on a usage error and 1
/// on any validation, I/O or convergence failure.
int cli_main(int argc, char** argv);
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace kpconv
