#include "pcisr/cli.hpp"

int main(int argc, char** argv) { return pcisr::run_cli(argc, argv); }
