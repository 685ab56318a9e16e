void set_prev(char *buf, int pos, char c) {
    if (pos > 0) {
        buf[pos - 1] = c;
    }
}
