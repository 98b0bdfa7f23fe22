#!/usr/bin/env python
"""
Main executable which runs the skiff command-line interface from a source checkout.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import sys

from skiff.cli import main


if __name__ == '__main__':
    sys.exit(main())
