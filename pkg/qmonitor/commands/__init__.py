# Command families used by qmonitor.main
