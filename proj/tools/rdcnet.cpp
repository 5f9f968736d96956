#include <iostream>

#include "rdc/cli.hpp"

int main(int argc, char** argv) { return rdc::run_cli(argc, argv, std::cout, std::cerr); }
