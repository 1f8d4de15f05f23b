#include <iostream>

#include "neurodim/cli.hpp"

int main(int argc, char** argv) { return neurodim::run_cli(argc, argv, std::cout, std::cerr); }
