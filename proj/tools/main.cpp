#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return rpdac::cliMain(argc, argv, std::cout, std::cerr); }
