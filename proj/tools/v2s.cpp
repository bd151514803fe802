#include <cstdio>

int main() {
  std::puts("v2s: placeholder");
  return 0;
}
