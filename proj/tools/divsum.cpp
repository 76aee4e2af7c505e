#include "divsum/cli.hpp"

int main(int argc, char** argv) { return divsum::run(argc, argv); }
