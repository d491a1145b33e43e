#include "calibrl/cli.hpp"

int main(int argc, char** argv) { return calibrl::cli::run(argc, argv); }
