import re
import unicodedata


def slugify(title, sep="-"):
    text = unicodedata.normalize("NFKD", title).encode("ascii", "ignore").decode("ascii")
    text = re.sub(r"[^a-zA-Z0-9]+", sep, text).strip(sep)
    return text.lower()
