from setuptools import setup

setup(
    name="sqlalchemy-plus",
    version="0.0.0",
    description="Helpers",
    author="dev",
    packages=["sqlalchemy_plus"],
    install_requires=["requests"],
)
