// SPDX-License-Identifier: Apache-2.0

#include "deskvla/cli.hpp"

int main(int argc, char** argv) { return deskvla::cli::main(argc, argv); }
