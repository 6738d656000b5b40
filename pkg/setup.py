#!/usr/bin/env python
"""
Setup script for DeskCLR
"""
import os
from setuptools import setup, find_packages

# Get the long description from README.md
with open(os.path.join(os.path.abspath(os.path.dirname(__file__)), 'README.md'),
          encoding='utf-8') as f:
    long_description = f.read()

setup(
    name="deskclr",
    version="0.1.0",
    description="Desk-scale contrastive representation learning with online pseudo-labels and margin losses",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("tests",)),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.20.0",
        "opencv-python>=4.5.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0",
            "scikit-learn>=1.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "deskclr=deskclr.main:main",
        ],
    },
    keywords="contrastive-learning, self-supervised, k-means, memory-bank, representation-learning",
    include_package_data=True,
)
