void copy_name(char *src) {
    char buf[16];
    strncpy(buf, src, sizeof(buf) - 1);
    buf[15] = '\0';
    log_name(buf);
}
