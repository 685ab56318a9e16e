void log_event(FILE *fp, char *event) {
    fprintf(fp, "%s", event);
    fflush(fp);
}
