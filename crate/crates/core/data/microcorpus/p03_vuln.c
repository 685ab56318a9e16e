void format_id(int id, char *tag) {
    char out[24];
    sprintf(out, "%d-%s", id, tag);
    emit(out);
}
