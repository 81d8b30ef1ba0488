#include <iostream>

#include "lnwarm/cli.hpp"

int main(int argc, char** argv) { return lnwarm::cli::run(argc, argv, std::cout, std::cerr); }
