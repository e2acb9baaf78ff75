#include <malloc.h>

#include <iostream>

#include "pointmoment/cli.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees the same large buffers every step; keeping
  // them off mmap avoids page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return pointmoment::cli::run(argc, argv, std::cout, std::cerr);
}
