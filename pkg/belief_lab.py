#!/usr/bin/env python3
"""
Belief-graph laboratory entry point.
Run `python belief_lab.py --help` for the subcommands.
"""

import sys

from beliefgraph.cli import main

if __name__ == "__main__":
    sys.exit(main())
