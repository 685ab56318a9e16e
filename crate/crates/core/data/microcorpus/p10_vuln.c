void log_event(FILE *fp, char *event) {
    // event text is attacker controlled
    fprintf(fp, event);
    fflush(fp);
}
