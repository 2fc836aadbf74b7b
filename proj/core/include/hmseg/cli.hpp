#pragma once

#include <string>
#include <vector>

namespace hmseg::cli {

// Entry point shared by the binary and in-process tests. args excludes the
// program name. Returns the process exit code; failures print one
// "error: <class>: <message>" line on stderr.
int run(const std::vector<std::string>& args);

}  // namespace hmseg::cli
