void copy_chunk(char *dst, char *src, int len) {
    /* negative len becomes huge size_t */
    memcpy(dst, src, len);
}
