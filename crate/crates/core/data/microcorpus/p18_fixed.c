int sum_bytes(char *buf, int cap) {
    int total = 0;
    for (int i = 0; i < cap; i++) {
        total += buf[i];
    }
    return total;
}
