#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace texroi {

/// Entry point of the `texroi` tool. Returns 0 on success, 1 on a usage
/// error and 2 on a data error.
int cli_main(int argc, char** argv);

/// Same, with explicit arguments (without the program name) and streams.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace texroi
