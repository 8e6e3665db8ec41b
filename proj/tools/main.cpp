#include "histovit/cli.hpp"

int main(int argc, char** argv) { return histovit::cli::run(argc, argv); }
