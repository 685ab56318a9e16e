void copy_chunk(char *dst, char *src, int len) {
    if (len < 0) {
        return;
    }
    memcpy(dst, src, (size_t)len);
}
