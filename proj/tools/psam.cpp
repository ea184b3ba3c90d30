#include <iostream>

#include "psam/cli.hpp"

int main(int argc, char** argv) { return psam::cli::run({argv + 1, argv + argc}, std::cout, std::cerr); }
