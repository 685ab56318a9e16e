void flush_scratch(void) {
    char *scratch = malloc(32);
    fill(scratch);
    free(scratch);
}
