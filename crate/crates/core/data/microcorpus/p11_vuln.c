void warn_user(char *detail) {
    char text[64];
    snprintf(text, sizeof(text), detail);
    alert(text);
}
