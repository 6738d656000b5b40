#!/usr/bin/env python
"""
DeskCLR Launcher

This script runs the DeskCLR command line from a source checkout.
"""
import sys

from deskclr.main import main

if __name__ == "__main__":
    sys.exit(main())
