#include "stabletd/cli.hpp"

int main(int argc, char** argv) { return stabletd::cli::run(argc, argv); }
