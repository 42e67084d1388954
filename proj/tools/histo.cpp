#include "histo/cli.hpp"

int main(int argc, char** argv) { return histo::cli::run(argc, argv); }
