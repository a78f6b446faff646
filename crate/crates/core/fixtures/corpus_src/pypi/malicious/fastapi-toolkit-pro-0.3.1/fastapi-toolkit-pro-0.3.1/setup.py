from setuptools import setup

setup(
    name="fastapi-toolkit-pro",
    version="0.3.1",
    description="Helpers",
    author="dev",
    packages=["fastapi_toolkit_pro"],
    install_requires=["requests"],
)
