void read_line(void) {
    char line[32];
    gets(line); // unbounded read
    handle(line);
}
