#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hypercd {

// Runs the `hypercd` command line. args[0] is the program name. Returns the
// process exit code: 0 on success, the ErrorKind value for toolkit errors,
// 2 for argument errors and 1 for anything unexpected.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hypercd
