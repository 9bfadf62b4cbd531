from setuptools import setup, find_packages

setup(
    name="widthlab",
    version="0.1.0",
    description="Finite-width training versus infinite-width limits of MLPs",
    author="Your Name",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    package_data={"widthlab": ["templates/*.j2", "configs/*.yaml"]},
    install_requires=[
        "click>=8.0.0",
        "PyYAML>=6.0",
        "Jinja2>=3.0.0",
        "numpy>=1.26",
        "scipy>=1.11",
    ],
    entry_points={
        "console_scripts": [
            "widthlab=widthlab.cli:cli",
        ],
    },
    python_requires=">=3.10",
)
