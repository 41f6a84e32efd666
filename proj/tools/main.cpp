#include "cli.hpp"

int main(int argc, char** argv) { return kom::cli::run(argc, argv); }
