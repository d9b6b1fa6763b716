#include "mmdit/cli.hpp"

int main(int argc, char** argv) { return mmdit::run(argc, argv); }
