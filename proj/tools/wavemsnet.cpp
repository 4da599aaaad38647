#include "wavemsnet/cli.hpp"

int main(int argc, char** argv) { return wavemsnet::run_experiment(argc, argv); }
