#include "qsdp/cli.hpp"

int main(int argc, char** argv) { return qsdp::cli::tool_main(argc, argv); }
