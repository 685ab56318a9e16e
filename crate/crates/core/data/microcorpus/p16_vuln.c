void list_dir(char *path) {
    char cmd[128];
    snprintf(cmd, sizeof(cmd), "ls %s", path);
    system(cmd); /* path goes to the shell */
}
