void record_total(long total) {
    short slot = total; // truncates large totals
    save_slot(slot);
}
