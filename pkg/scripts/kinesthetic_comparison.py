#!/usr/bin/env python3
"""Success versus dataset size for retrieval-reversal demonstrations against
hand-guided (kinesthetic-style) ones, 3 training seeds per size.
Extra flags are appended and win."""

import sys

from pvp.cli import main

if __name__ == "__main__":
    sys.exit(main([
        "ablate", "comparison",
        "--seeds", "0,1,2",
        "--sizes", "16,32,64,128",
        "--rollouts", "8",
        "--out", "results/comparison",
        "--no-timestamps",
        *sys.argv[1:],
    ]))
