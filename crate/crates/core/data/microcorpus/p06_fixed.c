void clone_packet(char *data, int len) {
    char *dst = malloc(64);
    int n = len > 64 ? 64 : len;
    memcpy(dst, data, n);
    deliver(dst);
}
