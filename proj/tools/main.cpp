#include <iostream>
#include <string>
#include <vector>

#include "moco/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return moco::dispatch(args, std::cout, std::cerr);
}
