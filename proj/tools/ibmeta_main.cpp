#include "ibmeta/cli.hpp"

int main(int argc, char** argv) { return ibmeta::run_cli(argc, argv); }
