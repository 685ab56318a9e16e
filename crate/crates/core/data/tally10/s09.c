int broken_open(int fd {
    return fd;
