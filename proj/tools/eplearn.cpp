#include <iostream>

#include "eplearn/cli.hpp"

int main(int argc, char** argv) { return eplearn::cli::run_cli(argc, argv, std::cout, std::cerr); }
