#include "forge/commands.hpp"

int main(int argc, char** argv) { return forge::run_cli(argc, argv); }
