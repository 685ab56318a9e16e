void trim_head(char *p, char *start) {
    p--;
    *p = '\0'; // may write before start
    shrink(start);
}
