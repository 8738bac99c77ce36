#include "camm/cli.hpp"

int main(int argc, char** argv) { return camm::cli::run(argc, argv); }
