// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace maskinv::cli {

// Parses and runs one maskinv invocation. `args` excludes the program name.
// Returns the process exit status: 0 when all outputs were written.
int run(const std::vector<std::string>& args);

}  // namespace maskinv::cli
