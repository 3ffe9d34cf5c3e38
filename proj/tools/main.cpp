#include "adaptsr/cli.hpp"

int main(int argc, char** argv) {
    return adaptsr::run_cli(argc, argv);
}
