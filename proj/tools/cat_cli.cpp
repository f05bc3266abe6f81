#include <string>
#include <vector>

#include "cat/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return cat::cli::run_cli(args);
}
