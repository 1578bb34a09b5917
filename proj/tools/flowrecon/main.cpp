#include <iostream>

#include "flowrecon/cli.hpp"

int main(int argc, char** argv) { return flowrecon::cli::cli_main(argc, argv, std::cout, std::cerr); }
