#include <iostream>
#include <string>
#include <vector>

#include "hypercd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return hypercd::run_cli(args, std::cout, std::cerr);
}
