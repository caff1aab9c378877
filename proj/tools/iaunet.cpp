#include "iau/cli.hpp"

int main(int argc, char** argv) { return iau::cli::run(argc, argv); }
