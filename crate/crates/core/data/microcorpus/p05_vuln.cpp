void fill_grid(int n) {
    int grid[10];
    for (int i = 0; i <= n; i++) {
        grid[i] = i; // off by one when n == 10
    }
    use_grid(grid);
}
