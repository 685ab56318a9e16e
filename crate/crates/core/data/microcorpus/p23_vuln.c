void init_state(void) {
    struct state *st = malloc(sizeof(struct state));
    st->ready = 1; /* malloc may fail */
    attach(st);
}
