#pragma once

#include <string>
#include <vector>

namespace groundling {

// Runs the command line interface. args excludes argv[0].
// Returns the process exit code: 0 on success, 1 on usage errors,
// 2 on data or file format errors.
int run_cli(const std::vector<std::string>& args);

}  // namespace groundling
