#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mstage {

// Entry point behind the `mstage` binary. `args` excludes the program name.
// Returns 0 on success, 1 on configuration or usage errors, 2 when a run
// fails numerically.
int RunCli(const std::vector<std::string>& args, std::ostream& out,
           std::ostream& err);

}  // namespace mstage
