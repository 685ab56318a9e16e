void dangling() {
    if (x > ) { use(x);
}
