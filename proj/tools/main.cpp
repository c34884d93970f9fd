// SPDX-License-Identifier: Apache-2.0
#include <vector>

#include "cli.hpp"

int main(int argc, char** argv) {
  return maskinv::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
