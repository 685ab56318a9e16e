char tail_char(char *text) {
    size_t n = strlen(text);
    return text[n]; // reads the NUL or beyond
}
