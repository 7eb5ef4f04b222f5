"""Quasi-static world model for contact-constrained pick and place.

The simulation is kinematic with a series-spring contact law: when a commanded
motion presses the carried body into an environment surface, the realized
penetration is ``commanded * K / (K + K_env)`` and the contact stores a force
``penetration * K * K_env / (K + K_env)`` as preload.  Two failure modes act
on the grasp offset:

1. preload release: when a stiffly-loaded contact breaks during retrieval and
   the stored force exceeds ``preload_crit``, the object shifts inside the hand
   by ``shift_per_newton * preload`` in a random direction;
2. slip: with a shallow grasp (tactile fullness ``f < f_stable``) and no
   corrective regrasp, every airborne retrieval tick slips with probability
   ``slip_hazard / record_hz``.

States are plain values; ``World`` itself holds only the configuration, so
independent episodes can run concurrently on separate states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from pvp.scene import ConfigError, ObjectSpec, SceneConfig, grasp_arc_range, rim_grasp_frame
from pvp.se3 import Pose, RelPose, interpolate, rotation_angle_between, translation_distance

_CONTACT_EPS = 1e-4  # m, bodies within this of a surface count as in contact


@dataclass(frozen=True)
class StiffnessSetting:
    """Impedance of the EE controller: translational and rotational stiffness."""

    k_t: float
    k_r: float
    mode: str  # stiff | compliant-full | compliant-rotational

    def __post_init__(self):
        if self.k_t <= 0 or self.k_r <= 0:
            raise ConfigError("stiffness values must be positive")


STIFF = StiffnessSetting(3000.0, 300.0, "stiff")
COMPLIANT_FULL = StiffnessSetting(30.0, 3.0, "compliant-full")
COMPLIANT_ROT = StiffnessSetting(3000.0, 3.0, "compliant-rotational")


@dataclass
class TactilePatch:
    """Synthetic fingertip sensor reading: contact fullness and patch centroid."""

    f: float
    centroid: np.ndarray  # (u, v) metres in the sensor plane, u measured from the tip


@dataclass
class ObservationFrame:
    """One wrist-view frame: 32x32x3 raster plus a 7-float proprioceptive vector."""

    raster: np.ndarray  # (32, 32, 3) float32 in [0, 1]
    proprio: np.ndarray  # (7,) float32: EE pose as 6-vector from origin + gripper bit


@dataclass
class FailureEvent:
    cause: str       # grasp_miss | unstable_grasp | wedge_shift | slip | misplacement
    magnitude: float
    tick: int


@dataclass
class WorldState:
    ee: Pose
    gripper_open: bool
    attached: Optional[str]
    grasp_offset: Optional[Pose]
    grasp_depth: float
    object_poses: dict
    preload: float = 0.0
    slipped: bool = False
    regrasp_count: int = 0
    step_count: int = 0
    eval_mode: bool = False
    released: Optional[str] = None
    released_stable: bool = True


RASTER_HW = 32
RASTER_CHANNELS = 3
GOAL_MARKER_RADIUS = 0.03
DEPTH_RANGE = 0.5  # m, inverse-depth channel saturates beyond this


class World:
    """Stateless simulator bound to one SceneConfig."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.phys = cfg.physics
        half_fov = 0.22
        centers = (np.arange(RASTER_HW) + 0.5) / RASTER_HW * (2 * half_fov) - half_fov
        self._cell_x, self._cell_y = np.meshgrid(centers, centers, indexing="xy")
        self.half_fov = half_fov

    # -- lifecycle ---------------------------------------------------------------

    def reset(self, seed: int, mode: str = "collect", target_label: Optional[str] = None) -> WorldState:
        """Fresh state: objects at goals; in eval mode the target starts in-hand
        at a randomized pose above the scene with its goal location free."""
        if mode not in ("collect", "eval"):
            raise ConfigError(f"unknown reset mode {mode!r}")
        poses = {o.label: o.goal.copy() for o in self.cfg.objects}
        state = WorldState(
            ee=self.cfg.scan_pose.copy(),
            gripper_open=True,
            attached=None,
            grasp_offset=None,
            grasp_depth=0.0,
            object_poses=poses,
            eval_mode=(mode == "eval"),
        )
        if mode == "collect":
            return state

        rng = np.random.default_rng(seed)
        labels = self.cfg.graspable_labels()
        if not labels:
            raise ConfigError("no graspable objects to evaluate on")
        if target_label is None:
            target_label = labels[int(rng.integers(len(labels)))]
        obj = self.cfg.by_label(target_label)
        arc = rng.uniform(*grasp_arc_range(obj))
        depth = rng.uniform(*self.phys.deep_depth) * self.phys.finger_depth
        grasp_frame = rim_grasp_frame(obj, obj.goal, arc)
        offset = grasp_frame.inverse().compose(obj.goal)
        base = self.cfg.clearance_base
        dx = rng.uniform(-self.cfg.eval_xy_spread, self.cfg.eval_xy_spread)
        dy = rng.uniform(-self.cfg.eval_xy_spread, self.cfg.eval_xy_spread)
        dz = rng.uniform(-self.cfg.eval_z_spread, self.cfg.eval_z_spread)
        start = Pose(base.q.copy(), base.t + np.array([dx, dy, dz]))
        poses[target_label] = start.compose(offset)
        return replace(
            state,
            ee=start,
            gripper_open=False,
            attached=target_label,
            grasp_offset=offset,
            grasp_depth=depth,
        )

    # -- constrained motion ---------------------------------------------------------

    def step(self, s: WorldState, cmd: RelPose, gripper_cmd: int, k: StiffnessSetting) -> WorldState:
        """Advance one command: impedance-limited motion, then gripper transition."""
        target = s.ee.compose(cmd.as_pose())
        engaged_before = self._contact_engaged(s)
        realized, force = self._resolve_motion(s, target, k)
        s2 = replace(s, ee=realized, step_count=s.step_count + 1)
        if s.attached is not None:
            s2.object_poses = dict(s.object_poses)
            s2.object_poses[s.attached] = realized.compose(s.grasp_offset)
        # stored wedge force persists while its contact stays engaged
        persists = engaged_before and self._contact_engaged(s2)
        s2.preload = max(force, s.preload if persists else 0.0)

        if gripper_cmd == 0 and not s.gripper_open:
            s2 = self._release(s2)
        elif gripper_cmd == 1 and s.gripper_open:
            s2.gripper_open = False  # closing on air attaches nothing
        return s2

    def _resolve_motion(self, s: WorldState, target: Pose, k: StiffnessSetting):
        alpha_t = k.k_t / (k.k_t + self.phys.k_env)
        corr = np.zeros(3)
        force = 0.0
        k_ser = self.phys.k_series(k.k_t)

        if s.attached is not None:
            obj = self.cfg.by_label(s.attached)
            obj_t = target.compose(s.grasp_offset).t
            for pen, axis_sign in self._penetrations_object(obj, obj_t):
                corr += axis_sign * pen * (1.0 - alpha_t)
                force = max(force, pen * k_ser)
        else:
            for pen, axis_sign in self._penetrations_ee(target.t):
                corr += axis_sign * pen * (1.0 - alpha_t)
                force = max(force, pen * k_ser)

        q = target.q
        if s.attached is not None and self._rotation_constrained(s):
            alpha_r = k.k_r / (k.k_r + self.phys.k_env)
            q = interpolate(Pose(s.ee.q), Pose(target.q), alpha_r).q
        return Pose(q, target.t + corr), force

    def _plate_zone(self, obj: ObjectSpec, t: np.ndarray):
        """Where a plate's lower edge is relative to the rack: ("gap", slot_x),
        ("wall", slot_x) on top of a wall, or None when off the rack footprint."""
        slots = self.cfg.slots
        if slots is None or obj.shape != "plate":
            return None
        rack_half = max(abs(x) for x in slots.xs) + slots.half_gap + slots.wall_thickness
        if abs(t[1]) > slots.y_half_len or abs(t[0]) > rack_half:
            return None
        slot_x = slots.xs[slots.nearest_slot(t[0])]
        play = slots.half_gap - obj.height / 2.0
        if abs(t[0] - slot_x) <= play + slots.wall_thickness / 2.0:
            return ("gap", slot_x)
        return ("wall", slot_x)

    def _penetrations_object(self, obj: ObjectSpec, t: np.ndarray):
        """Yield (penetration, world correction direction) for the carried object."""
        out = []
        if self.cfg.scenario == "dishrack" and obj.shape == "plate" and self.cfg.slots:
            slots = self.cfg.slots
            bottom = t[2] - obj.origin_drop
            zone = self._plate_zone(obj, t)
            if bottom < slots.wall_height and zone is not None:
                kind, slot_x = zone
                if kind == "gap":  # between the walls: elastic lateral pinch + slot floor
                    play = slots.half_gap - obj.height / 2.0
                    dx = t[0] - slot_x
                    if abs(dx) > play:
                        pen = abs(dx) - play
                        out.append((pen, np.array([-math.copysign(1.0, dx), 0.0, 0.0])))
                    if t[2] < obj.origin_drop:  # slot floor at z = 0
                        out.append((obj.origin_drop - t[2], np.array([0.0, 0.0, 1.0])))
                else:  # pressing down onto a wall top
                    floor = slots.wall_height + obj.origin_drop
                    if t[2] < floor:
                        out.append((floor - t[2], np.array([0.0, 0.0, 1.0])))
                return out
        # generic: rest on the highest support under the object, else the table
        floor = self._support_top(t) + obj.origin_drop
        if t[2] < floor:
            out.append((floor - t[2], np.array([0.0, 0.0, 1.0])))
        return out

    def _penetrations_ee(self, t: np.ndarray):
        out = []
        if t[2] < 0.0:
            out.append((-t[2], np.array([0.0, 0.0, 1.0])))
        if self.cfg.scenario == "dishrack" and self.cfg.slots:
            slots = self.cfg.slots
            if t[2] < slots.wall_height and abs(t[1]) < slots.y_half_len:
                slot_x = slots.xs[slots.nearest_slot(t[0])]
                dx = t[0] - slot_x
                if abs(dx) > slots.half_gap:  # pressing into a wall face
                    pen = abs(dx) - slots.half_gap
                    out.append((pen, np.array([-math.copysign(1.0, dx), 0.0, 0.0])))
        return out

    def _support_top(self, t: np.ndarray) -> float:
        top = 0.0
        for centre_xy, radius, s_top in self.cfg.supports():
            if np.linalg.norm(t[:2] - centre_xy) <= radius:
                top = max(top, s_top)
        return top

    def _contact_engaged(self, s: WorldState) -> bool:
        """Is the carried object still pinned by its resting contact?"""
        if s.attached is None:
            return False
        obj = self.cfg.by_label(s.attached)
        return self._resting_constrained(obj, s.object_poses[s.attached])

    def _rotation_constrained(self, s: WorldState) -> bool:
        return self._contact_engaged(s)

    # -- grasping ------------------------------------------------------------------

    def close_gripper(self, s: WorldState, k: StiffnessSetting, grasp, rng: np.random.Generator):
        """Close on a grasp candidate.  Returns (state, failure event or None).

        A 1-D alignment error models residual perception error along the
        scene's constraint axis; with the object contact-constrained, the
        series spring stores ``k_series * |error|`` as preload.  The EE itself
        settles at the fraction of the error its own stiffness wins.
        """
        if (
            translation_distance(s.ee, grasp.pose) > self.phys.capture_pos
            or rotation_angle_between(s.ee, grasp.pose) > self.phys.capture_rot
        ):
            miss = FailureEvent("grasp_miss", translation_distance(s.ee, grasp.pose), s.step_count)
            return replace(s, gripper_open=False), miss

        obj = self.cfg.by_label(grasp.object_id)
        eps = float(np.clip(rng.normal(0.0, self.phys.align_sigma),
                            -self.phys.capture_pos, self.phys.capture_pos))
        axis = np.array([1.0, 0.0, 0.0]) if self.cfg.scenario == "dishrack" else np.array([0.0, 0.0, 1.0])
        residual = eps * k.k_t / (k.k_t + self.phys.k_env)
        ee2 = Pose(s.ee.q.copy(), s.ee.t + residual * axis)

        constrained = self._resting_constrained(obj, s.object_poses[obj.label])
        preload = self.phys.k_series(k.k_t) * abs(eps) if constrained else 0.0
        # a lower EE than the candidate's nominal pose inserts the fingers deeper
        depth = grasp.depth + max(0.0, grasp.pose.t[2] - ee2.t[2])
        depth = float(np.clip(depth, 0.0, self.phys.finger_depth))
        offset = ee2.inverse().compose(s.object_poses[obj.label])
        s2 = replace(
            s,
            ee=ee2,
            gripper_open=False,
            attached=obj.label,
            grasp_offset=offset,
            grasp_depth=depth,
            preload=preload,
            step_count=s.step_count + 1,
        )
        return s2, None

    def _resting_constrained(self, obj: ObjectSpec, pose: Pose) -> bool:
        if self.cfg.scenario == "dishrack" and obj.shape == "plate" and self.cfg.slots:
            zone = self._plate_zone(obj, pose.t)
            return (
                zone is not None
                and zone[0] == "gap"
                and (pose.t[2] - obj.origin_drop) < self.cfg.slots.wall_height
            )
        return (pose.t[2] - obj.origin_drop) - self._support_top(pose.t) < _CONTACT_EPS

    def _release(self, s: WorldState) -> WorldState:
        s2 = replace(s, gripper_open=True, preload=0.0)
        if s.attached is None:
            return s2
        label = s.attached
        pose, stable = self._settle(self.cfg.by_label(label), s.object_poses[label])
        s2.object_poses = dict(s.object_poses)
        s2.object_poses[label] = pose
        s2.attached = None
        s2.grasp_offset = None
        s2.grasp_depth = 0.0
        s2.released = label
        s2.released_stable = stable
        return s2

    def _settle(self, obj: ObjectSpec, pose: Pose):
        """Drop a released object onto whatever is under it.

        A plate whose midline is over a slot opening slides down between the
        walls (the gap recentres it within the free play); one released over a
        wall or with its edge caught ends up perched on top, which is not a
        stable placement."""
        t = pose.t.copy()
        if self.cfg.scenario == "dishrack" and obj.shape == "plate" and self.cfg.slots:
            slots = self.cfg.slots
            zone = self._plate_zone(obj, t)
            if zone is not None:
                _, slot_x = zone
                play = slots.half_gap - obj.height / 2.0
                dx = t[0] - slot_x
                if abs(dx) <= slots.half_gap and t[2] - obj.origin_drop < slots.wall_height + obj.radius:
                    t[0] = slot_x + float(np.clip(dx, -play, play))
                    t[2] = obj.origin_drop  # slides down between the walls to the floor
                    return Pose(pose.q.copy(), t), True
                t[2] = slots.wall_height + obj.origin_drop
                return Pose(pose.q.copy(), t), False
        t[2] = self._support_top(t) + obj.origin_drop
        return Pose(pose.q.copy(), t), True

    # -- retrieval -------------------------------------------------------------------

    def retrieve_tick(self, s: WorldState, cmd: RelPose, rng: np.random.Generator,
                      k: StiffnessSetting = COMPLIANT_ROT):
        """One 120 Hz retrieval sub-step: motion plus the two failure processes."""
        if s.attached is None:
            raise ConfigError("retrieve_tick requires an attached object")
        engaged_before = self._contact_engaged(s)
        preload_before = s.preload
        s2 = self.step(s, cmd, 1, k)
        events = []
        if engaged_before and not self._contact_engaged(s2):
            # resting contact broke this tick: stored preload releases
            if preload_before > self.phys.preload_crit:
                mag = self.phys.shift_per_newton * preload_before
                rot = self.phys.shift_rot_per_newton * preload_before
                s2 = self._shift_in_hand(s2, mag, rot, rng)
                events.append(FailureEvent("wedge_shift", mag, s2.step_count))
            s2.preload = 0.0
        f = self.tactile_fullness(s2)
        airborne = s2.attached is not None and not self._contact_engaged(s2)
        if (
            airborne
            and f < self.phys.f_stable
            and s2.regrasp_count == 0
            and not s2.slipped
            and rng.random() < self.phys.slip_hazard / self.phys.record_hz
        ):
            s2 = self._shift_in_hand(s2, self.phys.slip_shift, self.phys.slip_rot, rng)
            s2.slipped = True
            events.append(FailureEvent("slip", self.phys.slip_shift, s2.step_count))
        return s2, events

    def _shift_in_hand(self, s: WorldState, magnitude: float, rot_angle: float,
                       rng: np.random.Generator) -> WorldState:
        t_dir = _unit_sphere(rng)
        r_axis = _unit_sphere(rng)
        delta = Pose.from_axis_angle(r_axis, rot_angle, magnitude * t_dir)
        offset = s.grasp_offset.compose(delta)
        s2 = replace(s, grasp_offset=offset)
        s2.object_poses = dict(s.object_poses)
        s2.object_poses[s.attached] = s.ee.compose(offset)
        return s2

    # -- sensing --------------------------------------------------------------------

    def tactile_fullness(self, s: WorldState) -> float:
        if s.gripper_open or s.attached is None:
            return 0.0
        return float(np.clip(s.grasp_depth / self.phys.finger_depth, 0.0, 1.0))

    def read_tactile(self, s: WorldState) -> TactilePatch:
        """Contact strip model: insertion depth d covers sensor span [0, d] from
        the tip, so the patch centroid sits at d/2 (ideal: finger_depth/2)."""
        f = self.tactile_fullness(s)
        if f == 0.0:
            return TactilePatch(0.0, np.zeros(2))
        centroid_u = min(s.grasp_depth, self.phys.finger_depth) / 2.0
        return TactilePatch(f, np.array([centroid_u, 0.0]))

    def render_observation(self, s: WorldState) -> ObservationFrame:
        """Orthographic 32x32 raster viewed along the EE z-axis.

        Channels: 0 object occupancy, 1 goal markers, 2 inverse-depth proxy.
        Objects project as discs of their primary radius; everything is
        computed in the EE frame so the view translates and yaws with the
        wrist."""
        raster = np.zeros((RASTER_HW, RASTER_HW, RASTER_CHANNELS))
        ee_inv = s.ee.inverse()
        for o in self.cfg.objects:
            p = ee_inv.transform_point(s.object_poses[o.label].t)
            mask = (self._cell_x - p[0]) ** 2 + (self._cell_y - p[1]) ** 2 <= o.radius ** 2
            if mask.any():
                raster[:, :, 0] = np.maximum(raster[:, :, 0], mask.astype(float))
                inv_depth = float(np.clip(1.0 - p[2] / DEPTH_RANGE, 0.0, 1.0))
                raster[:, :, 2] = np.maximum(raster[:, :, 2], mask * inv_depth)
            g = ee_inv.transform_point(o.goal.t)
            gmask = (self._cell_x - g[0]) ** 2 + (self._cell_y - g[1]) ** 2 <= GOAL_MARKER_RADIUS ** 2
            raster[:, :, 1] = np.maximum(raster[:, :, 1], gmask.astype(float))
        # EE pose relative to the scene origin as a 6-vector, plus the gripper bit
        rel = np.concatenate([s.ee.t, s.ee.rotvec().as_vector()])
        proprio = np.concatenate([rel, [0.0 if s.gripper_open else 1.0]]).astype(np.float32)
        return ObservationFrame(raster.astype(np.float32), proprio)

    # -- outcome -------------------------------------------------------------------

    def placement_error(self, s: WorldState, label: str, goal: Pose):
        pose = s.object_poses[label]
        return translation_distance(pose, goal), rotation_angle_between(pose, goal)

    def check_success(self, s: WorldState, goal: Pose) -> bool:
        """Released object within the position/rotation tolerances and resting stably."""
        if s.released is None:
            return False
        pos_err, rot_err = self.placement_error(s, s.released, goal)
        return (
            pos_err <= self.phys.eps_pos
            and rot_err <= self.phys.eps_rot
            and s.released_stable
        )


def _unit_sphere(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.array([0.0, 0.0, 1.0])
    return v / n
