int peek_before(int *arr, int i) {
    if (i <= 0) return 0;
    return arr[i - 1];
}
