#include "commands.h"

int main(int argc, char** argv) { return dsmoe::cli::run(argc, argv); }
