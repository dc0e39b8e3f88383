#include <iostream>

#include "ctxil/cli.hpp"

int main(int argc, char** argv) { return ctxil::run_cli(argc, argv, std::cout, std::cerr); }
