void set_prev(char *buf, int pos, char c) {
    buf[pos - 1] = c; /* pos may be zero */
}
