void list_dir(char *path) {
    if (strpbrk(path, ";|&$`")) {
        return;
    }
    char cmd[128];
    snprintf(cmd, sizeof(cmd), "ls %s", path);
    system(cmd);
}
