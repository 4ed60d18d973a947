#include "cpfs/cli.hpp"

int main(int argc, char** argv) { return cpfs::run_cli(argc, argv); }
