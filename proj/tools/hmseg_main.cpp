#include <string>
#include <vector>

#include "hmseg/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return hmseg::cli::run(args);
}
