// Placeholder until the real subcommands land; a stub CLI must fail loudly.
#include <cstdio>
int main() {
    std::fprintf(stderr, "error: cli not implemented yet\n");
    return 1;
}
