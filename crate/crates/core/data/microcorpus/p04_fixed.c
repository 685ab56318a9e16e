int store_value(int idx, int v) {
    int table[8];
    if (idx < 0 || idx >= 8) return -1;
    table[idx] = v;
    return table[idx];
}
