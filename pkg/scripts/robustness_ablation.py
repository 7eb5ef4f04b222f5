#!/usr/bin/env python3
"""Failure counts of the collection loop under naive / compliant / compliant+regrasp
grasping, 5 seeds x 128 episodes each. Extra flags are appended and win."""

import sys

from pvp.cli import main

if __name__ == "__main__":
    sys.exit(main([
        "ablate", "robustness",
        "--seeds", "0,1,2,3,4",
        "--episodes", "128",
        "--out", "results/robustness",
        "--no-timestamps",
        *sys.argv[1:],
    ]))
