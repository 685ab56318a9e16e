void format_id(int id, char *tag) {
    char out[24];
    snprintf(out, sizeof(out), "%d-%s", id, tag);
    emit(out);
}
