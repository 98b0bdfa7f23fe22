"""
Setuptools packaging for skiff

Usage:
    pip install .
    pip install .[test]

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import re
import io
import os.path

from setuptools import setup, find_packages


def read_version():
    """Read __version__ without importing the package (and its dependencies)"""
    with io.open(os.path.join(os.path.dirname(__file__), 'skiff', '__init__.py'), encoding='utf-8') as f:
        return re.search(r"^__version__ = '([^']+)'", f.read(), re.M).group(1)


setup(
    name='skiff',
    version=read_version(),
    description='HPC container launcher with a squashed shared image store and a multi-node launch simulator',
    license='MIT',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.11',
    install_requires=[
        'numpy>=1.22',
        'matplotlib>=3.5',
        'PyYAML>=6.0',
        'simulus>=1.2',
    ],
    extras_require={'test': ['pytest>=7']},
    entry_points={'console_scripts': ['skiff=skiff.cli:main']},
)
