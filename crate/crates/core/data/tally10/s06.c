long sum_to(long n) {
    long acc = 0;
    for (long i = 1; i <= n; i++) acc += i;
    return acc;
}
