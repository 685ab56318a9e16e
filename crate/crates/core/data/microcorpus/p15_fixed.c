char last_sep(char *s, int n) {
    while (n >= 0 && s[n] != '/') {
        n--;
    }
    return n >= 0 ? s[n] : '\0';
}
