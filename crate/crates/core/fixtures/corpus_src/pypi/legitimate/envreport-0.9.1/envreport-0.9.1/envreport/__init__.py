import platform
import socket
import sys


def report():
    lines = [
        "python: " + sys.version.split()[0],
        "platform: " + platform.platform(),
        "host: " + socket.gethostname(),
    ]
    return "\n".join(lines)


if __name__ == "__main__":
    print(report())
