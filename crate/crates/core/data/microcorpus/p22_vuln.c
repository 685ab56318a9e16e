void flush_scratch(void) {
    char scratch[32];
    fill(scratch);
    free(scratch); /* stack address */
}
