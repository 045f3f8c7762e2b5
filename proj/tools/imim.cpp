#include <iostream>

#include "imim/cli.hpp"

int main(int argc, char** argv) {
  return imim::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
