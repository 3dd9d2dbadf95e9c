#include "ovdet/cli.hpp"

int main(int argc, char** argv) { return ovdet::cli::run_cli(argc, argv); }
