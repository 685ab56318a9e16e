char *dup_label(char *label) {
    size_t n = strlen(label) + 1;
    char *out = malloc(n);
    memcpy(out, label, n);
    return out;
}
