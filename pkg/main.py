#!/usr/bin/env python3
"""
Flow Lab - Main Entry Point
Stochastic-flow simulation and verification laboratory for singular SDEs.
"""

import sys
import os

# Add the current directory to the path so we can import our modules
sys.path.insert(0, os.path.dirname(__file__))

from flowlab.lab_cli import main

if __name__ == "__main__":
    sys.exit(main())
