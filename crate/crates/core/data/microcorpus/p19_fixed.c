char tail_char(char *text) {
    size_t n = strlen(text);
    if (n == 0) return '\0';
    return text[n - 1];
}
