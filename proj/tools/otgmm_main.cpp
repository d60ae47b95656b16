#include "otgmm/cli.hpp"

int main(int argc, char** argv) { return otgmm::run_cli(argc, argv); }
