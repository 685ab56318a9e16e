void show_message(char *msg) {
    printf("%s", msg);
}
