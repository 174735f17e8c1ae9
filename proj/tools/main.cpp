#include "tierkd_cli.hpp"

int main(int argc, char** argv) { return tierkd::cli::run(argc, argv); }
