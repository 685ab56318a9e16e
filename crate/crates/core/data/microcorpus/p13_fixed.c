void trim_head(char *p, char *start) {
    if (p > start) {
        p--;
        *p = '\0';
    }
    shrink(start);
}
