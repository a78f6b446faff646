from setuptools import setup

setup(
    name="pytorch-nightly-helper",
    version="1.0.2",
    description="Helpers",
    author="dev",
    packages=["pytorch_nightly_helper"],
    install_requires=["requests"],
)
