#include "relectra/cli.hpp"

int main(int argc, char** argv) { return relectra::cli::run(argc, argv); }
