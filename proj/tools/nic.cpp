// SPDX-License-Identifier: Apache-2.0
#include "nic/cli.hpp"

int main(int argc, char** argv) { return nic::cli::run(argc, argv); }
