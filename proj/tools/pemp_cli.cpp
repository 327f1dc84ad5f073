#include <iostream>

#include "pemp/cli.hpp"

int main(int argc, char** argv) {
  return pemp::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
