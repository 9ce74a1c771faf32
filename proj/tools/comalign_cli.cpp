#include "comalign/cli.hpp"

int main(int argc, char** argv) { return comalign::cli::run(argc, argv); }
