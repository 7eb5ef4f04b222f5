"""Self-supervised demonstration collection: pick, retrieve, reverse into place.

One episode runs four phases: (1) sample and select a rim grasp, (2) approach
and close compliantly, correcting shallow grasps from tactile feedback, (3)
retrieve the object to a randomized clearance pose while recording the EE path
at 120 Hz, (4) replay the reversed, downsampled path as a placing
demonstration while rendering observations.  The placing rollout is what gets
stored: observation stacks paired with relative-pose actions.

A scripted kinesthetic-style demonstrator produces comparison data over the
same scenes: the same underlying place path, but with idle pauses, heading
wobble, occasional overshoot-and-correct detours and a delayed gripper
opening, calibrated to the longer, noisier episodes a human teacher records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from pvp.grasp import generate_candidates, pregrasp_of, prune_by_label, select_grasp
from pvp.grasp import LabelQuery
from pvp.scene import ConfigError, SceneConfig
from pvp.se3 import NoiseParams, Pose, RelPose, interpolate, perturb_pose, relative_action
from pvp.sim import (
    COMPLIANT_FULL,
    COMPLIANT_ROT,
    STIFF,
    FailureEvent,
    ObservationFrame,
    World,
    WorldState,
)

RECORD_HZ = 120.0


# -- trajectory containers -----------------------------------------------------------


@dataclass
class DenseTrajectory:
    """EE poses with timestamps as recorded during retrieval."""

    entries: list  # of (Pose, float seconds)
    rate_hz: float = RECORD_HZ

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("dense trajectory must contain at least one entry")
        times = [t for _, t in self.entries]
        if times[0] != 0.0:
            raise ConfigError("dense trajectory must start at t = 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("timestamps must be strictly increasing")

    @property
    def duration(self) -> float:
        return self.entries[-1][1]


@dataclass
class SparseTrajectory:
    """Poses at a uniform ``dt`` spacing (index k stands for time k*dt)."""

    poses: list
    dt: float

    def __len__(self):
        return len(self.poses)

    def reversed(self) -> "SparseTrajectory":
        return SparseTrajectory(list(reversed(self.poses)), self.dt)


@dataclass
class Action:
    delta: RelPose
    gripper: int  # 1 closed, 0 open

    def __post_init__(self):
        if self.gripper not in (0, 1):
            raise ConfigError("gripper command must be 0 or 1")
        v = self.delta.as_vector()
        if not np.all(np.isfinite(v)):
            raise ConfigError("action delta must be finite")

    def is_identity(self) -> bool:
        return bool(np.all(self.delta.as_vector() == 0.0))


@dataclass
class StackedObservation:
    """``stack_depth`` rasters concatenated along channels, newest last."""

    raster: np.ndarray   # (32, 32, 3 * stack_depth) float32
    proprio: np.ndarray  # (7,) float32, of the newest frame


@dataclass
class Episode:
    """A demonstration: T+1 frames and T actions, exposed as (o, a, o') tuples."""

    frames: list     # of ObservationFrame, length T+1 (empty if collection failed)
    actions: list    # of Action, length T
    metadata: dict
    stack_depth: int = 4

    def __len__(self):
        return len(self.actions)

    def stacked(self, i: int) -> StackedObservation:
        # before enough history exists, the first frame is replicated
        idx = [max(0, i - k) for k in range(self.stack_depth - 1, -1, -1)]
        raster = np.concatenate([self.frames[j].raster for j in idx], axis=2)
        return StackedObservation(raster, self.frames[i].proprio)

    @property
    def tuples(self) -> list:
        return [
            (self.stacked(i), self.actions[i], self.stacked(i + 1))
            for i in range(len(self.actions))
        ]


@dataclass
class TelemetryRecord:
    seed: int
    target: str
    outcome: bool
    events: list            # of FailureEvent
    preload_peak: float
    regrasp_count: int
    length: int             # number of actions in the stored episode
    retrieve_duration: float

    def causes(self) -> list:
        return [e.cause for e in self.events]


@dataclass
class CollectConfig:
    dt: float = 0.2
    n_tail: int = 5
    sigma_tr: float = 0.025
    noise_fraction: float = 0.75
    noise: NoiseParams = field(default_factory=NoiseParams)
    enable_ccg: bool = True
    enable_tr: bool = True
    enable_noise_aug: bool = False
    stack_depth: int = 4
    pregrasp_offset: float = 0.08
    approach_speed: float = 0.25     # m/s, unrecorded transit moves
    retrieve_speed: float = 0.09     # m/s, recorded retrieval moves
    retrieve_settle: float = 2.29    # s, accel/decel allowance beyond the nominal path time
    duration_jitter: float = 0.41    # s, std of extra retrieval time
    max_regrasps: int = 3
    target_query: str = ""           # substring filter for the picked object

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ConfigError("noise_fraction must be within [0, 1]")
        if self.n_tail < 1 or self.stack_depth < 1:
            raise ConfigError("n_tail and stack_depth must be at least 1")
        if self.sigma_tr < 0 or self.duration_jitter < 0 or self.retrieve_settle < 0:
            raise ConfigError("spreads must be non-negative")
        if min(self.approach_speed, self.retrieve_speed) <= 0:
            raise ConfigError("speeds must be positive")


# -- core trajectory operations ---------------------------------------------------------


def downsample(d: DenseTrajectory, dt: float) -> SparseTrajectory:
    """Nearest-in-time pose at every ``dt`` from t0; ties go to the earlier entry.

    Output length is ceil((t_M - t_0)/dt) + 1; every pose is a member of the
    dense input (no interpolation).
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    times = np.array([t for _, t in d.entries])
    t0, t_m = times[0], times[-1]
    m_bar = int(math.ceil((t_m - t0) / dt)) if len(times) > 1 else 0
    out = []
    for k in range(m_bar + 1):
        target = t0 + k * dt
        j = int(np.searchsorted(times, target, side="left"))
        if j == 0:
            pick = 0
        elif j >= len(times):
            pick = len(times) - 1
        else:
            pick = j - 1 if target - times[j - 1] <= times[j] - target else j
        out.append(d.entries[pick][0].copy())
    return SparseTrajectory(out, dt)


def actions_from_place(place: SparseTrajectory, n_tail: int) -> list:
    """Relative-pose actions between consecutive place waypoints, gripper held
    closed, then ``n_tail`` identity actions with the gripper open."""
    if len(place) < 2:
        raise ConfigError("need at least two waypoints to form actions")
    acts = [
        Action(relative_action(place.poses[i], place.poses[i + 1]), 1)
        for i in range(len(place) - 1)
    ]
    acts.extend(Action(RelPose(), 0) for _ in range(n_tail))
    return acts


def reverse_to_actions(s: SparseTrajectory, n_tail: int) -> list:
    """Reverse a retrieval-ordered trajectory into placing actions."""
    return actions_from_place(s.reversed(), n_tail)


def perturb_count(n_poses: int, fraction: float) -> int:
    return int(math.ceil(fraction * n_poses))


def augment_waypoints(
    place: SparseTrajectory, cc: CollectConfig, rng: np.random.Generator
) -> SparseTrajectory:
    """Perturb the leading waypoints of a place-ordered trajectory.

    The first ceil(noise_fraction * len) poses are jittered; the trailing
    contact-approach poses are returned bit-identical, so the demonstration
    still funnels onto the exact goal.
    """
    n = perturb_count(len(place), cc.noise_fraction)
    out = []
    for i, p in enumerate(place.poses):
        out.append(perturb_pose(p, cc.noise, rng) if i < n else p.copy())
    return SparseTrajectory(out, place.dt)


def sample_clearance(base: Pose, sigma_tr: float, rng: np.random.Generator) -> Pose:
    """Clearance pose: base translation jittered per-axis, rotation untouched."""
    if sigma_tr < 0:
        raise ConfigError("sigma_tr must be non-negative")
    return Pose(base.q.copy(), base.t + rng.normal(0.0, sigma_tr, 3))


def tactile_regrasp(world: World, patch) -> RelPose | None:
    """Corrective EE motion from the tactile reading, or None for a stable grasp.

    The patch centroid of a full grasp sits half a finger from the tip; a
    shallower centroid means the fingers hold only the rim edge.  The
    correction translates the EE by the centroid shortfall along the tool
    approach axis (tool +z points at the scene), driving the fingers deeper.
    """
    f = patch.f
    if f >= world.phys.f_stable:
        return None
    ideal_u = world.phys.finger_depth / 2.0
    correction = ideal_u - float(patch.centroid[0])
    return RelPose(t=np.array([0.0, 0.0, correction]))


# -- episode assembly -----------------------------------------------------------------


def _transit(world: World, s: WorldState, target: Pose, speed: float,
             k=STIFF, gripper: int = 0) -> WorldState:
    """Move smoothly to ``target`` by interpolated substeps (not recorded)."""
    dist = float(np.linalg.norm(target.t - s.ee.t))
    n = max(1, int(math.ceil(dist / (speed / RECORD_HZ))))
    start = s.ee.copy()
    for i in range(1, n + 1):
        via = interpolate(start, target, i / n)
        s = world.step(s, relative_action(s.ee, via), gripper, k)
    return s


def _metadata(cfg, cc, seed, source, target, outcome, causes, s_start, extra=None):
    md = {
        "seed": int(seed),
        "scenario": cfg.scenario,
        "source": source,
        "target": target,
        "noise_augmented": bool(cc.enable_noise_aug),
        "ccg": bool(cc.enable_ccg),
        "tr": bool(cc.enable_tr),
        "outcome": bool(outcome),
        "failure_causes": list(causes),
        "regrasp_count": 0,
        "grasp_depth": 0.0,
        "start_ee": None,
        "grasp_offset": None,
        "goal": None,
    }
    if s_start is not None:
        md["start_ee"] = [float(v) for v in np.concatenate([s_start.ee.q, s_start.ee.t])]
        md["grasp_offset"] = [
            float(v)
            for v in np.concatenate([s_start.grasp_offset.q, s_start.grasp_offset.t])
        ]
        md["grasp_depth"] = float(s_start.grasp_depth)
        md["regrasp_count"] = int(s_start.regrasp_count)
    if extra:
        md.update(extra)
    return md


def _failed_episode(cfg, cc, seed, source, target, events):
    causes = [e.cause for e in events]
    md = _metadata(cfg, cc, seed, source, target, False, causes, None)
    md["length"] = 0
    ep = Episode([], [], md, stack_depth=cc.stack_depth)
    tel = TelemetryRecord(seed, target, False, list(events), 0.0, 0, 0, 0.0)
    return ep, tel


def _grasp_phase(world: World, cc: CollectConfig, rng: np.random.Generator):
    """Plan, approach, close (compliantly if enabled), tactile-correct if enabled.

    Returns (state, grasp, events); state is None when the grasp failed.
    """
    cfg = world.cfg
    s = world.reset(seed=0, mode="collect")
    labels = cfg.graspable_labels()
    target = labels[int(rng.integers(len(labels)))]
    query = LabelQuery(cc.target_query) if cc.target_query else LabelQuery(target)
    candidates = generate_candidates(cfg, s.object_poses, rng)
    pruned = prune_by_label(candidates, query)
    pruned = [c for c in pruned if c.object_id == target] or pruned
    if not pruned:
        return None, None, [FailureEvent("grasp_miss", 0.0, 0)], target
    grasp = select_grasp(pruned, rng)
    target = grasp.object_id

    s = _transit(world, s, pregrasp_of(grasp, cc.pregrasp_offset), cc.approach_speed)
    s = _transit(world, s, grasp.pose, cc.approach_speed)
    k_close = COMPLIANT_FULL if cc.enable_ccg else STIFF
    s, miss = world.close_gripper(s, k_close, grasp, rng)
    if miss is not None:
        return None, grasp, [miss], target

    events = []
    if cc.enable_tr:
        for _ in range(cc.max_regrasps):
            corr = tactile_regrasp(world, world.read_tactile(s))
            if corr is None:
                break
            s = world.step(s, RelPose(), 0, k_close)            # reopen
            s = world.step(s, corr, 0, k_close)                 # sink deeper
            s, miss = world.close_gripper(s, k_close, grasp, rng)
            if miss is not None:
                return None, grasp, [miss], target
            s = replace(s, regrasp_count=s.regrasp_count + 1)
        if tactile_regrasp(world, world.read_tactile(s)) is not None:
            ev = FailureEvent("unstable_grasp", world.tactile_fullness(s), s.step_count)
            return None, grasp, [ev], target
    return s, grasp, events, target


def _retrieve_phase(world: World, s: WorldState, grasp, cc: CollectConfig,
                    rng: np.random.Generator):
    """Record the EE at 120 Hz while lifting to pregrasp then to clearance."""
    pre = pregrasp_of(grasp, cc.pregrasp_offset)
    pre = Pose(s.ee.q.copy(), pre.t)  # keep whatever orientation closing settled on
    clearance = sample_clearance(world.cfg.clearance_base, cc.sigma_tr, rng)
    extra = abs(float(rng.normal(0.0, cc.duration_jitter)))

    legs = [(s.ee.copy(), pre), (pre, clearance)]
    lengths = [float(np.linalg.norm(b.t - a.t)) for a, b in legs]
    total = sum(lengths)
    duration = total / cc.retrieve_speed + cc.retrieve_settle + extra
    n_ticks = max(1, int(math.ceil(duration * RECORD_HZ)))

    entries = [(s.ee.copy(), 0.0)]
    events = []
    preload_peak = s.preload
    for i in range(1, n_ticks + 1):
        dist = total * i / n_ticks
        if dist <= lengths[0] and lengths[0] > 0:
            target = interpolate(legs[0][0], legs[0][1], dist / lengths[0])
        elif lengths[1] > 0:
            u = min(1.0, (dist - lengths[0]) / lengths[1])
            target = interpolate(legs[1][0], legs[1][1], u)
        else:
            target = clearance
        s, ev = world.retrieve_tick(s, relative_action(s.ee, target), rng)
        events.extend(ev)
        preload_peak = max(preload_peak, s.preload)
        entries.append((s.ee.copy(), i / RECORD_HZ))
    dense = DenseTrajectory(entries)
    return s, dense, events, preload_peak


def _rollout_place(world: World, s: WorldState, place: SparseTrajectory,
                   actions: list, cc: CollectConfig):
    """Execute the place path and record frames.  Waypoint-servo execution:
    each motion step targets the next stored waypoint, so the rollout visits
    the (possibly perturbed) waypoints exactly and the approach tail stays
    on the demonstration path."""
    s = _transit(world, s, place.poses[0], cc.approach_speed, k=COMPLIANT_ROT, gripper=1)
    frames = [world.render_observation(s)]
    n_move = len(place) - 1
    for i, act in enumerate(actions):
        if i < n_move:
            cmd = relative_action(s.ee, place.poses[i + 1])
        else:
            cmd = act.delta
        s = world.step(s, cmd, act.gripper, COMPLIANT_ROT)
        frames.append(world.render_observation(s))
    return s, frames


def run_pvp_episode(cfg: SceneConfig, cc: CollectConfig, seed: int):
    """One full pick-to-place demonstration.  Returns (Episode, TelemetryRecord).

    Grasp failures yield an empty episode marked failed; they never raise.
    """
    world = World(cfg)
    rng = np.random.default_rng(seed)
    s, grasp, events, target = _grasp_phase(world, cc, rng)
    if s is None:
        return _failed_episode(cfg, cc, seed, "pvp", target, events)

    s, dense, retr_events, preload_peak = _retrieve_phase(world, s, grasp, cc, rng)
    events = events + retr_events

    sparse = downsample(dense, cc.dt)
    place = sparse.reversed()
    if cc.enable_noise_aug:
        place = augment_waypoints(place, cc, rng)
    actions = actions_from_place(place, cc.n_tail)

    start = replace(s)
    s, frames = _rollout_place(world, s, place, actions, cc)

    goal = cfg.by_label(target).goal
    outcome = world.check_success(s, goal)
    if not outcome and not events:
        pos_err, _ = world.placement_error(s, target, goal)
        events = events + [FailureEvent("misplacement", float(pos_err), s.step_count)]

    md = _metadata(
        cfg, cc, seed, "pvp", target, outcome, [e.cause for e in events], start,
        extra={
            "length": len(actions),
            "goal": [float(v) for v in np.concatenate([goal.q, goal.t])],
        },
    )
    ep = Episode(frames, actions, md, stack_depth=cc.stack_depth)
    tel = TelemetryRecord(
        seed, target, outcome, events, float(preload_peak),
        int(start.regrasp_count), len(actions), dense.duration,
    )
    return ep, tel


# -- kinesthetic-style scripted demonstrator ----------------------------------------------


@dataclass
class KinestheticConfig:
    """Shape of the scripted human-like teacher.

    Defaults are calibrated so 128-episode datasets land on the reference
    length statistics (mean 41.66, std 5.69).  Zeroing every field reduces the
    demonstrator to the plain reversed place trajectory.
    """

    jitter_sigma: float = 0.004    # m, AR(1) heading wobble on early waypoints
    jitter_rho: float = 0.85
    idle_mean: float = 9.5         # expected total inserted idle steps
    idle_max_segments: int = 4
    overshoot_prob: float = 0.55
    overshoot_dist: float = 0.035  # m, how far past the waypoint it strays
    delay_mean: float = 2.0        # extra closed-gripper holds before opening

    def zeroed(self) -> "KinestheticConfig":
        return KinestheticConfig(0.0, 0.0, 0.0, 0, 0.0, 0.0, 0.0)


def _script_waypoints(place: SparseTrajectory, kc: KinestheticConfig,
                      rng: np.random.Generator):
    """Corrupt a clean place path the way a hand-guided demo wanders.

    Only the leading 75% of waypoints are touched so the final approach still
    funnels onto the goal; idle steps repeat a waypoint in place.
    """
    poses = [p.copy() for p in place.poses]
    n_edit = perturb_count(len(poses), 0.75)

    # heading wobble: correlated lateral offsets, zero by the approach tail
    if kc.jitter_sigma > 0 and n_edit > 1:
        drift = np.zeros(2)
        sigma_inno = kc.jitter_sigma * math.sqrt(max(1e-12, 1.0 - kc.jitter_rho ** 2))
        for i in range(1, n_edit):
            drift = kc.jitter_rho * drift + rng.normal(0.0, sigma_inno, 2)
            poses[i] = Pose(poses[i].q.copy(), poses[i].t + np.array([drift[0], drift[1], 0.0]))

    out = []
    # overshoot-and-correct: stray past one early waypoint, then come back
    shoot_at = -1
    if kc.overshoot_prob > 0 and rng.random() < kc.overshoot_prob and n_edit > 2:
        shoot_at = 1 + int(rng.integers(n_edit - 2))
    for i, p in enumerate(poses):
        out.append(p)
        if i == shoot_at:
            direction = p.t - poses[i - 1].t
            norm = float(np.linalg.norm(direction))
            if norm > 1e-9:
                stray = Pose(p.q.copy(), p.t + direction / norm * kc.overshoot_dist)
                out.extend([stray, p.copy()])

    # idle pauses: stand still at a few early waypoints
    if kc.idle_mean > 0 and kc.idle_max_segments > 0:
        n_segments = 1 + int(rng.integers(kc.idle_max_segments))
        per = kc.idle_mean / ((kc.idle_max_segments + 1) / 2.0)
        with_idle = []
        stops = set(rng.integers(1, max(2, n_edit), n_segments).tolist())
        for i, p in enumerate(out):
            with_idle.append(p)
            if i in stops:
                hold = max(1, int(round(rng.normal(per, per / 2.0))))
                with_idle.extend(p.copy() for _ in range(hold))
        out = with_idle

    delay = 0
    if kc.delay_mean > 0:
        delay = int(rng.integers(int(2 * kc.delay_mean) + 1))
    return SparseTrajectory(out, place.dt), delay


def run_kinesthetic_episode(cfg: SceneConfig, seed: int,
                            cc: CollectConfig | None = None,
                            kc: KinestheticConfig | None = None):
    """A hand-guided-style demonstration over the same scene and goal.

    Built on the same pick-and-retrieve machinery (identical seeding), then
    rescripted: wobble, pauses, an occasional overshoot, and a late gripper
    opening.  Returns (Episode, TelemetryRecord).
    """
    cc = cc if cc is not None else CollectConfig()
    cc = replace(cc, enable_noise_aug=False, enable_ccg=True, enable_tr=True)
    kc = kc if kc is not None else KinestheticConfig()

    world = World(cfg)
    rng = np.random.default_rng(seed)
    s, grasp, events, target = _grasp_phase(world, cc, rng)
    if s is None:
        return _failed_episode(cfg, cc, seed, "kinesthetic", target, events)

    s, dense, retr_events, preload_peak = _retrieve_phase(world, s, grasp, cc, rng)
    events = events + retr_events

    place = downsample(dense, cc.dt).reversed()
    scripted, delay = _script_waypoints(place, kc, rng)
    actions = actions_from_place(scripted, cc.n_tail)
    # the teacher settles before letting go: extra holds, still closed
    hold = [Action(RelPose(), 1) for _ in range(delay)]
    actions = actions[: len(scripted) - 1] + hold + actions[len(scripted) - 1:]

    start = replace(s)
    s, frames = _rollout_place(world, s, scripted, actions, cc)

    goal = cfg.by_label(target).goal
    outcome = world.check_success(s, goal)
    if not outcome and not events:
        pos_err, _ = world.placement_error(s, target, goal)
        events = events + [FailureEvent("misplacement", float(pos_err), s.step_count)]

    md = _metadata(
        cfg, cc, seed, "kinesthetic", target, outcome, [e.cause for e in events], start,
        extra={
            "length": len(actions),
            "goal": [float(v) for v in np.concatenate([goal.q, goal.t])],
        },
    )
    ep = Episode(frames, actions, md, stack_depth=cc.stack_depth)
    tel = TelemetryRecord(
        seed, target, outcome, events, float(preload_peak),
        int(start.regrasp_count), len(actions), dense.duration,
    )
    return ep, tel
