#include <iostream>
#include <string>
#include <vector>

#include "icc/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    const auto result = icc::cli::dispatch(args);
    (result.exit_code == 0 ? std::cout : std::cerr) << result.summary << std::flush;
    return result.exit_code;
}
