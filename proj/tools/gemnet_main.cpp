#include <iostream>
#include <string>
#include <vector>

#include "gemnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gemnet::run(args, std::cout, std::cerr);
}
