#include "cropmae/cli.hpp"

int main(int argc, char** argv) { return cropmae::cli::run_cli(argc, argv); }
