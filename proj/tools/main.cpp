#include "lcdlab/cli.hpp"

int main(int argc, char** argv) { return lcdlab::cli_dispatch(argc, argv); }
