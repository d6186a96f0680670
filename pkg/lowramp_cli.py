"""
Low-RAMP toolkit - command line launcher
"""
import sys

from lowramp.cli import main

if __name__ == '__main__':
    sys.exit(main())
