#!/usr/bin/env python3
"""Run the hrapr command line from a source checkout: ./run_hrapr.py synth --out-stem out/scene"""

import sys

from hrapr.cli import main

if __name__ == '__main__':
    sys.exit(main())
