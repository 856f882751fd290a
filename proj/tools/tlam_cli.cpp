#include <iostream>
#include <string>
#include <vector>

#include "tlam/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return tlam::run_cli(args, std::cout, std::cerr);
}
