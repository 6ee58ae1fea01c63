#include "setinfer/cli.hpp"

int main(int argc, char** argv) { return setinfer::cli::run(argc, argv); }
