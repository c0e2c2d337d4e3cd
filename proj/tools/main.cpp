#include "treeformer/cli.hpp"

int main(int argc, char** argv) { return treeformer::cli::run(argc, argv); }
