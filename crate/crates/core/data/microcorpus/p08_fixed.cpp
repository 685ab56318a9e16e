void append_items(int *src, int count) {
    int cap = count > 4 ? count : 4;
    int *heap = new int[cap];
    for (int i = 0; i < count; i++) {
        heap[i] = src[i];
    }
    push_all(heap);
}
