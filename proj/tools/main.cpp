// SPDX-License-Identifier: Apache-2.0
#include <string>
#include <vector>

#include "vaflow/cli/commands.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return vaflow::cli::run_cli(args);
}
