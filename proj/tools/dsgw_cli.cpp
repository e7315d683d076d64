#include "dsgw/cli.hpp"

int main(int argc, char** argv) { return dsgw::run_cli(argc, argv); }
