#include <iostream>
#include <string>
#include <vector>

#include "popql/harness.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return popql::cli_dispatch(args, std::cout, std::cerr);
}
