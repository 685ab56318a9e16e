void copy_name(char *src) {
    char buf[16];
    strcpy(buf, src); /* no bound check */
    log_name(buf);
}
