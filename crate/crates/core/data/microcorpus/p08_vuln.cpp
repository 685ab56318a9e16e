void append_items(int *src, int count) {
    int *heap = new int[4];
    for (int i = 0; i < count; i++) {
        heap[i] = src[i];
    }
    push_all(heap);
}
