#include <iostream>
#include <string>
#include <vector>

#include "sfuida/cli.hpp"

int main(int argc, char** argv) {
  return sfuida::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
