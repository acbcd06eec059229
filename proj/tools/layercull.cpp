#include <iostream>

#include "layercull_cli.hpp"

int main(int argc, char** argv) {
  return layercull::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
