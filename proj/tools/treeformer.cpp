#include <cstdio>

int main() {
    std::puts("treeformer: cli not wired yet");
    return 1;
}
