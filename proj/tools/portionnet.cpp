#include "portionnet/cli.hpp"

int main(int argc, char** argv) { return portionnet::run_cli(argc, argv); }
