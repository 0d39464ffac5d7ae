#include <iostream>
#include <string>
#include <vector>

#include "cyformer/experiment.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cyformer::run(args, std::cout, std::cerr);
}
