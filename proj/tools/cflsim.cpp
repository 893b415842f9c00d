#include "cflsim/cli.hpp"

int main(int argc, char** argv) { return cflsim::run_cli(argc, argv); }
