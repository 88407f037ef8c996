from setuptools import setup, find_packages

with open("README.md") as f:
    long_description = f.read()

setup(
    name="cashash",
    version="0.1.0",
    description="Out-of-core, multi-worker cascade hashing matcher for SIFT features.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    keywords="sift matching hashing structure-from-motion epipolar ransac",
    license="MIT",
    packages=find_packages(exclude=["ez_setup", "examples", "test"]),
    namespace_packages=[],
    include_package_data=False,
    zip_safe=False,
    python_requires=">=3.8",
    install_requires=[
        "numpy >= 1.20",
        "scipy >= 1.6",
        "sqlalchemy >= 1.4",
        "banal >= 1.0.1",
    ],
    extras_require={
        "dev": [
            "pip",
            "pytest",
            "wheel",
            "flake8",
            "coverage",
        ]
    },
    tests_require=["pytest"],
    test_suite="test",
    entry_points={"console_scripts": ["cashash = cashash.cli:main"]},
)
