#include <vector>

#include "qmv/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return qmv::cli::execute(args);
}
