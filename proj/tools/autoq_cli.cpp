#include "autoq/cli.hpp"

int main(int argc, char** argv) { return autoq::cli::cli_main(argc, argv); }
