#include "cebd/cli.hpp"

int main(int argc, char** argv) { return cebd::cli::run(argc, argv); }
