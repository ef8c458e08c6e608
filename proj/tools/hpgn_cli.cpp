#include "hpgn/cli.hpp"

int main(int argc, char** argv) { return hpgn::run(argc, argv); }
