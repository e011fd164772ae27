#include "simdiffrec/cli.hpp"

int main(int argc, char** argv) { return simdiffrec::cli::run_cli(argc, argv); }
