"""Scene configuration: objects, supports, slot geometry, physical constants.

Two builtin scenarios at desk scale (metres, world z up, table plane z = 0):

* ``dishrack``: a rack with four parallel slots along x; three plates rest
  vertically in three of them (one slot stays free).  Placing means sliding a
  plate back into its slot between the walls.
* ``table``: a bowl whose goal is centred on a static plate and a cup whose
  goal is centred on a coaster.

Every physical constant of the contact model lives in ``PhysicsParams`` so
calibration stays in one place, and the whole ``SceneConfig`` round-trips
through a documented JSON schema.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from pvp.se3 import Pose

DEG = math.pi / 180.0


class ConfigError(ValueError):
    """Raised for invalid or inconsistent scene/run configuration."""


@dataclass(frozen=True)
class PhysicsParams:
    """Constants of the quasi-static contact, grasp and failure model."""

    k_t_stiff: float = 3000.0        # N/m, translational stiffness (stiff mode)
    k_t_compliant: float = 30.0      # N/m (compliant mode)
    k_r_stiff: float = 300.0         # N*m/rad
    k_r_compliant: float = 3.0
    k_env: float = 3000.0            # N/m, environment contact stiffness
    preload_crit: float = 5.0        # N, stored force above this shifts the grasp on release
    f_stable: float = 0.7            # tactile fullness below this risks slip
    finger_depth: float = 0.02       # m, full finger insertion depth
    eps_pos: float = 0.01            # m, placement success tolerance
    eps_rot: float = 5.0 * DEG       # rad
    capture_pos: float = 0.01        # m, closing allowed within these of the grasp pose
    capture_rot: float = 5.0 * DEG
    align_sigma: float = 0.002       # m, 1-D grasp alignment error at closing
    shift_per_newton: float = 0.002  # m/N, in-hand shift magnitude per preload
    shift_rot_per_newton: float = 1.0 * DEG  # rad/N, rotational part of the shift
    slip_hazard: float = 0.03        # 1/s, slip rate while airborne with a shallow grasp
    slip_shift: float = 0.025        # m, in-hand translation when slip fires
    slip_rot: float = 8.0 * DEG
    shallow_frac: float = 0.12       # fraction of sampled grasps that are shallow
    shallow_depth: tuple = (0.42, 0.60)  # shallow depth range, fraction of finger_depth
    deep_depth: tuple = (0.80, 1.00)
    record_hz: float = 120.0         # retrieval recording rate

    def k_series(self, k_t: float) -> float:
        """Series stiffness of the EE spring against the environment spring."""
        return k_t * self.k_env / (k_t + self.k_env)


@dataclass
class ObjectSpec:
    """A parametric primitive with a label and a goal pose.

    ``radius``/``height`` parameterize the shape (for a plate, height is the
    disc thickness).  ``origin_drop`` is the distance from the object origin
    down to its resting bottom at the goal orientation; ``support_z`` is the
    height of the surface it rests on, so ``goal.t[2] = support_z +
    origin_drop`` for a well-formed scene.
    """

    label: str
    shape: str                 # plate | bowl | cup | coaster
    radius: float
    height: float
    goal: Pose
    graspable: bool = True
    support_z: float = 0.0
    origin_drop: float = 0.0
    slot_index: Optional[int] = None  # dishrack plates: which slot the goal occupies

    def __post_init__(self):
        if self.shape not in ("plate", "bowl", "cup", "coaster"):
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.radius <= 0 or self.height <= 0:
            raise ConfigError(f"{self.label}: dimensions must be positive")


@dataclass
class SlotGeometry:
    """Parallel rack slots: gaps between walls, extended along y."""

    xs: list            # slot centre x coordinates
    half_gap: float     # half of the free gap width
    wall_height: float
    wall_thickness: float
    y_half_len: float

    def nearest_slot(self, x: float) -> int:
        return int(np.argmin([abs(x - sx) for sx in self.xs]))


@dataclass
class SceneConfig:
    scenario: str
    objects: list
    slots: Optional[SlotGeometry]
    scan_pose: Pose
    clearance_base: Pose
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    eval_xy_spread: float = 0.06   # m, uniform half-range of evaluation start offsets
    eval_z_spread: float = 0.03
    seed: int = 0

    def __post_init__(self):
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"labels must be unique, got {labels}")
        self._check_goals_disjoint()

    def _check_goals_disjoint(self):
        # goal poses must be collision-free; targets may legitimately rest ON
        # supports (stacked goals), so only target pairs are constrained
        slot_seen = {}
        for i, a in enumerate(self.objects):
            if a.slot_index is not None:
                if a.slot_index in slot_seen:
                    raise ConfigError(
                        f"{a.label!r} and {slot_seen[a.slot_index]!r} share slot {a.slot_index}"
                    )
                slot_seen[a.slot_index] = a.label
            for b in self.objects[i + 1:]:
                d = np.linalg.norm(a.goal.t - b.goal.t)
                if d < 1e-9:
                    raise ConfigError(f"goals of {a.label!r} and {b.label!r} coincide")
                if (
                    a.graspable
                    and b.graspable
                    and self.scenario != "dishrack"
                    and d < min(a.radius, b.radius)
                ):
                    raise ConfigError(f"goals of {a.label!r} and {b.label!r} overlap")

    # -- lookups ---------------------------------------------------------------

    def by_label(self, label: str) -> ObjectSpec:
        for o in self.objects:
            if o.label == label:
                return o
        raise KeyError(label)

    def graspable_labels(self) -> list:
        return [o.label for o in self.objects if o.graspable]

    def supports(self) -> list:
        """Static resting surfaces (non-graspable objects) as (centre_xy, radius, top_z)."""
        out = []
        for o in self.objects:
            if not o.graspable:
                out.append((o.goal.t[:2].copy(), o.radius, o.goal.t[2] + o.height / 2.0))
        return out

    # -- serialization -----------------------------------------------------------

    def to_json_dict(self) -> dict:
        def pose_d(p: Pose) -> dict:
            return {"q": [float(v) for v in p.q], "t": [float(v) for v in p.t]}

        d = {
            "scenario": self.scenario,
            "seed": self.seed,
            "eval_xy_spread": self.eval_xy_spread,
            "eval_z_spread": self.eval_z_spread,
            "scan_pose": pose_d(self.scan_pose),
            "clearance_base": pose_d(self.clearance_base),
            "objects": [
                {
                    "label": o.label,
                    "shape": o.shape,
                    "radius": o.radius,
                    "height": o.height,
                    "goal": pose_d(o.goal),
                    "graspable": o.graspable,
                    "support_z": o.support_z,
                    "origin_drop": o.origin_drop,
                    "slot_index": o.slot_index,
                }
                for o in self.objects
            ],
            "slots": None
            if self.slots is None
            else {
                "xs": list(self.slots.xs),
                "half_gap": self.slots.half_gap,
                "wall_height": self.slots.wall_height,
                "wall_thickness": self.slots.wall_thickness,
                "y_half_len": self.slots.y_half_len,
            },
            "physics": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in self.physics.__dict__.items()},
        }
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "SceneConfig":
        def pose_p(e: dict) -> Pose:
            return Pose(np.array(e["q"]), np.array(e["t"]))

        try:
            phys_d = dict(d.get("physics", {}))
            for k in ("shallow_depth", "deep_depth"):
                if k in phys_d:
                    phys_d[k] = tuple(phys_d[k])
            slots = d.get("slots")
            return SceneConfig(
                scenario=d["scenario"],
                objects=[
                    ObjectSpec(
                        label=o["label"],
                        shape=o["shape"],
                        radius=o["radius"],
                        height=o["height"],
                        goal=pose_p(o["goal"]),
                        graspable=o.get("graspable", True),
                        support_z=o.get("support_z", 0.0),
                        origin_drop=o.get("origin_drop", 0.0),
                        slot_index=o.get("slot_index"),
                    )
                    for o in d["objects"]
                ],
                slots=None
                if slots is None
                else SlotGeometry(
                    xs=list(slots["xs"]),
                    half_gap=slots["half_gap"],
                    wall_height=slots["wall_height"],
                    wall_thickness=slots["wall_thickness"],
                    y_half_len=slots["y_half_len"],
                ),
                scan_pose=pose_p(d["scan_pose"]),
                clearance_base=pose_p(d["clearance_base"]),
                physics=PhysicsParams(**phys_d),
                eval_xy_spread=d.get("eval_xy_spread", 0.06),
                eval_z_spread=d.get("eval_z_spread", 0.03),
                seed=d.get("seed", 0),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed scene config: {e}") from e

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "SceneConfig":
        with open(path) as f:
            return SceneConfig.from_json_dict(json.load(f))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "SceneConfig":
        return replace(self, seed=seed)


# -- gripper frame convention ---------------------------------------------------

# EE approaches from above: the tool z-axis points down at the scene and the
# tool x-axis is the finger-closing axis.
EE_DOWN_Q = np.array([0.0, 1.0, 0.0, 0.0])  # pi about world x: z -> -z, y -> -y


def top_down_pose(t, yaw: float = 0.0) -> Pose:
    """EE pose looking straight down, fingers closing along world x rotated by yaw."""
    down = Pose(EE_DOWN_Q, np.asarray(t, dtype=float))
    if yaw == 0.0:
        return down
    # yaw spins the tool about its own vertical axis; the position stays put
    spun = Pose.from_axis_angle([0, 0, 1], yaw).compose(Pose(EE_DOWN_Q))
    return Pose(spun.q, down.t)


def grasp_arc_range(obj: ObjectSpec) -> tuple:
    """Arc of rim angles with clearance for a top-down pinch.

    Plates standing in a rack expose only the top of the disc (the rest is
    below the wall line or too close to it); bowls and cups expose the whole
    rim circle.
    """
    if obj.shape == "plate":
        return (-math.pi / 4, math.pi / 4)
    return (-math.pi, math.pi)


def rim_grasp_frame(obj: ObjectSpec, obj_pose: Pose, arc_angle: float) -> Pose:
    """EE pose pinching the object's rim at ``arc_angle`` along the graspable feature.

    Plates stand vertically (disc normal along world x): the rim is pinched
    across the disc faces, so the closing axis is x for every arc angle.  Bowls
    and cups are pinched across the wall, closing axis radial.
    """
    c = obj_pose.t
    if obj.shape == "plate":
        # arc angle measured from the top of the disc, in the disc plane (y-z)
        p = c + obj.radius * np.array([0.0, math.sin(arc_angle), math.cos(arc_angle)])
        return top_down_pose(p)
    if obj.shape in ("bowl", "cup"):
        p = c + np.array(
            [obj.radius * math.cos(arc_angle), obj.radius * math.sin(arc_angle), obj.height]
        )
        return top_down_pose(p, yaw=arc_angle)
    raise ConfigError(f"{obj.label}: shape {obj.shape!r} has no graspable feature")


# -- builtin scenes ----------------------------------------------------------------


def make_dishrack_scene(seed: int = 0) -> SceneConfig:
    slots = SlotGeometry(
        xs=[-0.09, -0.03, 0.03, 0.09],
        half_gap=0.004,
        wall_height=0.04,
        wall_thickness=0.008,
        y_half_len=0.11,
    )
    r = 0.10
    labels = ["red plate", "green plate", "blue plate"]
    objects = []
    for label, slot in zip(labels, (1, 2, 3)):  # slot 0 stays free
        goal = Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([slots.xs[slot], 0.0, r]))
        objects.append(
            ObjectSpec(
                label=label,
                shape="plate",
                radius=r,
                height=0.005,
                goal=goal,
                support_z=0.0,
                origin_drop=r,
                slot_index=slot,
            )
        )
    return SceneConfig(
        scenario="dishrack",
        objects=objects,
        slots=slots,
        scan_pose=top_down_pose([0.0, 0.0, 0.45]),
        clearance_base=top_down_pose([0.0, 0.0, 0.35]),
        seed=seed,
    )


def make_table_scene(seed: int = 0) -> SceneConfig:
    plate = ObjectSpec(
        label="white plate",
        shape="plate",
        radius=0.10,
        height=0.01,
        goal=Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([-0.08, 0.06, 0.005])),
        graspable=False,
        support_z=0.0,
        origin_drop=0.005,
    )
    coaster = ObjectSpec(
        label="coaster",
        shape="coaster",
        radius=0.05,
        height=0.008,
        goal=Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.10, -0.08, 0.004])),
        graspable=False,
        support_z=0.0,
        origin_drop=0.004,
    )
    bowl = ObjectSpec(
        label="wood bowl",
        shape="bowl",
        radius=0.075,
        height=0.05,
        goal=Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([-0.08, 0.06, 0.01])),
        support_z=0.01,   # rests on the plate's top face
        origin_drop=0.0,  # origin at base centre
    )
    cup = ObjectSpec(
        label="steel cup",
        shape="cup",
        radius=0.035,
        height=0.09,
        goal=Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.10, -0.08, 0.008])),
        support_z=0.008,  # rests on the coaster
        origin_drop=0.0,
    )
    return SceneConfig(
        scenario="table",
        objects=[plate, coaster, bowl, cup],
        slots=None,
        scan_pose=top_down_pose([0.0, 0.0, 0.45]),
        clearance_base=top_down_pose([0.0, 0.0, 0.35]),
        seed=seed,
    )


BUILTIN_SCENES = {"dishrack": make_dishrack_scene, "table": make_table_scene}


def builtin_scene(name: str, seed: int = 0) -> SceneConfig:
    if name not in BUILTIN_SCENES:
        raise ConfigError(f"unknown scene {name!r}; builtins: {sorted(BUILTIN_SCENES)}")
    return BUILTIN_SCENES[name](seed)
