char last_sep(char *s, int n) {
    while (n >= 0 && s[n] != '/') {
        n--;
    }
    return s[n];
}
