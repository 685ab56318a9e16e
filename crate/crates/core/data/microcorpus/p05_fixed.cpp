void fill_grid(int n) {
    int grid[10];
    int limit = n < 10 ? n : 10;
    for (int i = 0; i < limit; i++) {
        grid[i] = i;
    }
    use_grid(grid);
}
