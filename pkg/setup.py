from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="bifield",
    version="1.0.0",
    description="Laboratory for subcritical contact branching random walks with immigration",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "bounds", "config", "cumulants", "errors", "experiment", "io_utils",
        "kernels", "main", "model", "moment_hierarchy", "oracle", "simulator",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Mathematics",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    python_requires=">=3.10",
    install_requires=requirements,
    extras_require={
        "test": ["hypothesis>=6.80", "sympy>=1.12"],
    },
    entry_points={
        "console_scripts": [
            "bifield=main:main",
        ],
    },
)
