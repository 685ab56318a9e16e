char *dup_label(char *label) {
    char *out = malloc(8);
    strcpy(out, label);
    return out;
}
