#include "recvsr/cli.hpp"

int main(int argc, char** argv) { return recvsr::cli::dispatch(argc, argv); }
