void show_message(char *msg) {
    printf(msg); /* format string from caller */
}
