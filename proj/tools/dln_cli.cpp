#include "dln/cli.hpp"

int main(int argc, char** argv) { return dln::cli::cli_main(argc, argv); }
