#!/usr/bin/env python3
"""
Setup script for Flow Lab
Stochastic-flow simulation and verification laboratory for singular SDEs.
"""

from setuptools import setup, find_packages
import os

# Read the README file
def read_readme():
    readme_path = os.path.join(os.path.dirname(__file__), 'README.md')
    if os.path.exists(readme_path):
        with open(readme_path, 'r', encoding='utf-8') as f:
            return f.read()
    return "Flow Lab - stochastic flows of singular SDEs: simulation, constants and Monte Carlo checks"

setup(
    name="sde-flow-lab",
    version="1.0.0",
    description="Simulation and verification laboratory for stochastic flows of singular SDEs",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    author="Flow Lab Team",
    author_email="",
    url="",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    package_data={
        "flowlab.scenarios": ["*.json"],
    },
    install_requires=[
        "torch>=2.0.0",
        "numpy>=1.24.0",
        "scipy>=1.12.0",
        "matplotlib>=3.7.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "black>=22.0.0",
            "flake8>=5.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "flowlab=flowlab.lab_cli:main",
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Mathematics",
        "Topic :: Scientific/Engineering :: Physics",
    ],
    python_requires=">=3.9",
    keywords="sde stochastic-flow euler-maruyama zvonkin krylov random-attractor monte-carlo",
    project_urls={
        "Bug Reports": "",
        "Source": "",
        "Documentation": "",
    },
)
