#include "dropforge/cli.hpp"

int main(int argc, char** argv) { return dropforge::cli::dispatch(argc, argv); }
