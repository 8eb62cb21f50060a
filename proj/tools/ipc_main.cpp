#include <cstdio>

int main() {
    printf("ipc: placeholder\n");
    return 0;
}
