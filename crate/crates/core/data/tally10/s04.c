unsigned int parity(unsigned int x) {
    x ^= x >> 16;
    x ^= x >> 8;
    return x & 1u;
}
