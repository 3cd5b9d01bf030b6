#include "dtmil/cli.hpp"

int main(int argc, char** argv) { return dtmil::cli_main(argc, argv); }
