from setuptools import setup

setup(
    name="envreport",
    version="0.9.1",
    description="Print interpreter and platform details for bug reports",
    author="Ilya Berg",
    author_email="ilya@example.org",
    packages=["envreport"],
)
