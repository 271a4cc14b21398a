#include "hcnaf/cli.hpp"

int main(int argc, char** argv) { return hcnaf::run_cli(argc, argv); }
