#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace deltafuse {

// Runs one CLI invocation. `args` excludes the program name. Returns the
// process exit code: 0 on success, 1 on a validation failure, 2 on an I/O,
// parse, or usage error. All output goes through the provided streams, so
// tests can drive the full command surface in-process.
int cli_run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deltafuse
