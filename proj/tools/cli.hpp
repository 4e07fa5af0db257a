#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace hmar::cli {

/// Runs one command. Results go to `out`; failures print a one-line JSON object to `err` and
/// return nonzero (1 for runtime errors, 2 for usage errors).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace hmar::cli
