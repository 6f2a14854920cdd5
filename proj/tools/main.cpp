#include "kvf/harness.hpp"

int main(int argc, char** argv) { return kvf::run_cli(argc, argv); }
