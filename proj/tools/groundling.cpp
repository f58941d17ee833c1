#include <string>
#include <vector>

#include "groundling/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return groundling::run_cli(args);
}
