// SPDX-License-Identifier: Apache-2.0

#include "pooch/cli.hpp"

int main(int argc, char** argv) { return pooch::run(argc, argv); }
