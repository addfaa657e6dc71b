#!/usr/bin/env python3
"""
Runner script for the SPI engine: python run.py <command> [options]
"""

import sys

from src.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
