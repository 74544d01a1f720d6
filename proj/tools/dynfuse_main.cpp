#include <iostream>

#include "dynfuse/cli.hpp"

int main(int argc, char** argv) { return dynfuse::run_cli(argc, argv, std::cout, std::cerr); }
