"""Grasp candidate generation over object rims, label pruning and selection.

Candidates are top-down pinches sampled along each object's graspable rim arc.
Sampled insertion depths mirror the imperfection of real grasp proposals: most
draws insert the fingers deep (a stable hold), a small fraction stay shallow
and leave the grasp at risk of slipping unless a tactile regrasp corrects it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pvp.scene import ConfigError, SceneConfig, grasp_arc_range, rim_grasp_frame
from pvp.se3 import Pose


class NoGraspError(RuntimeError):
    """No grasp candidate survives generation and pruning."""


@dataclass(frozen=True)
class GraspCandidate:
    pose: Pose        # EE pose that pinches the rim
    object_id: str
    depth: float      # m, finger insertion depth at closing
    arc_angle: float  # rad, where on the rim arc
    quality: float    # insertion depth as a fraction of the full finger


@dataclass(frozen=True)
class LabelQuery:
    """Case-insensitive substring match against object labels."""

    text: str

    def matches(self, label: str) -> bool:
        return self.text.lower() in label.lower()


def generate_candidates(
    cfg: SceneConfig,
    object_poses: dict,
    rng: np.random.Generator,
    per_object: int = 8,
) -> list:
    """Sample ``per_object`` rim grasps for every graspable object.

    Draw order is fixed per object (arc angles, shallow flags, depth fractions)
    so candidate sets are reproducible from the generator state alone.
    """
    if per_object < 1:
        raise ConfigError("per_object must be at least 1")
    phys = cfg.physics
    out = []
    for obj in cfg.objects:
        if not obj.graspable:
            continue
        lo, hi = grasp_arc_range(obj)
        arcs = rng.uniform(lo, hi, per_object)
        shallow = rng.random(per_object) < phys.shallow_frac
        u = rng.random(per_object)
        for arc, is_shallow, frac_u in zip(arcs, shallow, u):
            band = phys.shallow_depth if is_shallow else phys.deep_depth
            frac = band[0] + frac_u * (band[1] - band[0])
            depth = frac * phys.finger_depth
            pose = rim_grasp_frame(obj, object_poses[obj.label], float(arc))
            out.append(
                GraspCandidate(
                    pose=pose,
                    object_id=obj.label,
                    depth=float(depth),
                    arc_angle=float(arc),
                    quality=float(frac),
                )
            )
    return out


def prune_by_label(candidates: list, query: LabelQuery) -> list:
    """Keep candidates whose object label matches the query, preserving order."""
    return [c for c in candidates if query.matches(c.object_id)]


def select_grasp(candidates: list, rng: np.random.Generator) -> GraspCandidate:
    """Pick one candidate uniformly at random."""
    if not candidates:
        raise NoGraspError("no candidates to select from")
    return candidates[int(rng.integers(len(candidates)))]


def pregrasp_of(candidate: GraspCandidate, offset: float = 0.08) -> Pose:
    """Approach pose straight above the grasp, same orientation."""
    if offset <= 0.0:
        raise ConfigError("pregrasp offset must be positive")
    return Pose(candidate.pose.q.copy(), candidate.pose.t + np.array([0.0, 0.0, offset]))
