#include "commands.hpp"

int main(int argc, char** argv) { return mspcaps::cli::run(argc, argv); }
