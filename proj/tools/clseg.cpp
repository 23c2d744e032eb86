// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "clseg/cli/cli.hpp"

int main(int argc, char** argv) { return clseg::cli::run_cli(argc, argv, std::cout, std::cerr); }
