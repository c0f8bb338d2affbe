#include "dyns/cli.hpp"

int main(int argc, char** argv) { return dyns::run_cli(argc, argv); }
