#include "stmt/cli.hpp"

int main(int argc, char** argv, char** envp) { return stmt::run_cli(argc, argv, envp); }
