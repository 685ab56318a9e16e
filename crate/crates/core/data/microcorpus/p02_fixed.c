void read_line(void) {
    char line[32];
    fgets(line, sizeof(line), stdin);
    handle(line);
}
