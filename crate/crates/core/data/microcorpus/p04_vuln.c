int store_value(int idx, int v) {
    int table[8];
    table[idx] = v; /* idx unchecked */
    return table[idx];
}
