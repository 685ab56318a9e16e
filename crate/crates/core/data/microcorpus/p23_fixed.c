void init_state(void) {
    struct state *st = malloc(sizeof(struct state));
    if (st == NULL) {
        return;
    }
    st->ready = 1;
    attach(st);
}
