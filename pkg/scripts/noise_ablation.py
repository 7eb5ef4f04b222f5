#!/usr/bin/env python3
"""Success-rate grid of {mean-regression, mixture} heads trained on clean vs
noise-augmented demonstrations, 3 training seeds x 20 rollouts per cell.
Extra flags are appended and win."""

import sys

from pvp.cli import main

if __name__ == "__main__":
    sys.exit(main([
        "ablate", "noise",
        "--seeds", "0,1,2",
        "--episodes", "128",
        "--rollouts", "20",
        "--out", "results/noise",
        "--no-timestamps",
        *sys.argv[1:],
    ]))
