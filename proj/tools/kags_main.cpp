#include "kags/cli.hpp"

int main(int argc, char** argv) { return kags::run_cli(argc, argv); }
