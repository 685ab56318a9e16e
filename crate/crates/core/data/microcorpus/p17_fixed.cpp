void ping_host(char *host) {
    if (!valid_hostname(host)) {
        return;
    }
    char cmd[96];
    snprintf(cmd, sizeof(cmd), "ping -c1 %s", host);
    FILE *out = popen(cmd, "r");
    drain(out);
}
