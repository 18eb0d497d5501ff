#include "gee/cli.hpp"

int main(int argc, char** argv) { return gee::cli::run_cli(argc, argv); }
