#include "nullswap/cli.hpp"

int main(int argc, char** argv) { return nullswap::run_cli(argc, argv); }
