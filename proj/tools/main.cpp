#include "kpconv/cli.hpp"

int main(int argc, char** argv) { return kpconv::cli_main(argc, argv); }
