void fetch_block(char *dst, short offset) {
    unsigned int pos = offset; /* sign-extends */
    read_at(dst, pos);
}
