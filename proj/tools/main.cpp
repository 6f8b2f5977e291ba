#include "thermalign/cli.hpp"

int main(int argc, char** argv) { return thermalign::dispatch(argc, argv); }
