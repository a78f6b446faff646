from setuptools import setup

setup(
    name="csvkit-lite",
    version="2.0.3",
    description="Small helpers for reading and summarising CSV files",
    author="Dana Ortiz",
    author_email="dana@example.org",
    packages=["csvkit_lite"],
    install_requires=["chardet"],
)
