#include <iostream>

#include "im2tex/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return im2tex::cli::run(args, std::cout, std::cerr);
}
