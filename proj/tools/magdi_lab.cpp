#include "magdi/cli.hpp"

int main(int argc, char** argv) { return magdi::cli::dispatch(argc, argv); }
