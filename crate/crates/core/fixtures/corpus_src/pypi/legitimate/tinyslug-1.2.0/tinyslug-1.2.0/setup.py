from setuptools import setup

setup(
    name="tinyslug",
    version="1.2.0",
    description="Turn titles into URL slugs",
    author="Mara Quinn",
    author_email="mara@example.org",
    url="https://example.org/tinyslug",
    packages=["tinyslug"],
)
