int peek_before(int *arr, int i) {
    return arr[i - 1]; /* under-read when i == 0 */
}
