"""Contact-constrained pick-and-place: simulation, demonstration collection, and behavioural cloning.

The package simulates desk-scale placement tasks (plates into a dish rack,
tableware onto supports), synthesises expert placing demonstrations by
time-reversing compliant grasp-and-retrieve trajectories, and trains small
mixture-density policies on the result.  Everything is seeded and runs on a
plain CPU.
"""

from pvp.se3 import Pose, RelPose, RotVec, NoiseParams

__all__ = ["Pose", "RelPose", "RotVec", "NoiseParams"]

__version__ = "0.1.0"
