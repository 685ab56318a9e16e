void clone_packet(char *data, int len) {
    char *dst = malloc(64);
    memcpy(dst, data, len); /* len may exceed 64 */
    deliver(dst);
}
