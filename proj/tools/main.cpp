#include "cli.hpp"

int main(int argc, char** argv) { return reviewrec::cli::main_entry(argc, argv); }
