#include "fmalloc/cli.hpp"

int main(int argc, char** argv) { return fmalloc::cli_main(argc, argv); }
