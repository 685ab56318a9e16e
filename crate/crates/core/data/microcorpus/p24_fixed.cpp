void record_total(long total) {
    if (total > 32767 || total < -32768) {
        return;
    }
    short slot = (short)total;
    save_slot(slot);
}
