#include "texroi/cli.hpp"

int main(int argc, char** argv) { return texroi::cli_main(argc, argv); }
