#include <iostream>

#include "usmtl/cli.hpp"

int main(int argc, char** argv) { return usmtl::run_cli(argc, argv, std::cout, std::cerr); }
