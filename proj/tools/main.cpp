#include <iostream>

#include "mclseq/cli.hpp"

int main(int argc, char** argv) { return mclseq::cli::main(argc, argv, std::cout, std::cerr); }
