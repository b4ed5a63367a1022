#include <factlab/cli.hpp>

int main(int argc, char** argv) { return factlab::cli::run(argc, argv); }
