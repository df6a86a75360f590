#include "espt/cli.hpp"

int main(int argc, char** argv) { return espt::run_cli(argc, argv); }
