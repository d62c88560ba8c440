#include <iostream>

#include "quietread/app.hpp"

int main(int argc, char** argv) {
    return quietread::app::run(argc, argv, std::cout, std::cerr);
}
