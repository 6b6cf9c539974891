#include <iostream>

#include "tokenhier/cli.hpp"

int main(int argc, char** argv) { return tokenhier::run_cli(argc, argv, std::cout, std::cerr); }
