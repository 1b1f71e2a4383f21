#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace desklm::cli {

// Parses and dispatches one invocation. `args` excludes the program name.
// Exit codes: 0 success, 1 usage error, 2 runtime error.
int run(std::vector<std::string> args, std::ostream& out = std::cout,
        std::ostream& err = std::cerr);

} // namespace desklm::cli
