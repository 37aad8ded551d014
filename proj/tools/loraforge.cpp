// SPDX-License-Identifier: Apache-2.0
#include "loraforge/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return loraforge::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
