#include <iostream>
#include <string>
#include <vector>

#include "malvit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return malvit::run_cli(args, std::cout, std::cerr);
}
