void ping_host(char *host) {
    char cmd[96];
    snprintf(cmd, sizeof(cmd), "ping -c1 %s", host);
    FILE *out = popen(cmd, "r");
    drain(out);
}
