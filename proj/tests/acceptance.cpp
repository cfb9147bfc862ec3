// Placeholder until the acceptance criteria runner lands; a stub gate must
// fail, not fake a pass.
#include <cstdio>
int main() {
    std::fprintf(stderr, "acceptance runner not implemented yet\n");
    return 1;
}
