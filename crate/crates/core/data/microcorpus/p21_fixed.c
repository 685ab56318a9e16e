void fetch_block(char *dst, short offset) {
    if (offset < 0) {
        return;
    }
    unsigned int pos = (unsigned short)offset;
    read_at(dst, pos);
}
