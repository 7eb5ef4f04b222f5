"""Collection pipeline: downsampling, reversal, augmentation, episode invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvp.collect import (
    Action,
    CollectConfig,
    DenseTrajectory,
    Episode,
    KinestheticConfig,
    SparseTrajectory,
    actions_from_place,
    augment_waypoints,
    downsample,
    perturb_count,
    reverse_to_actions,
    run_kinesthetic_episode,
    run_pvp_episode,
    sample_clearance,
    tactile_regrasp,
)
from pvp.scene import ConfigError, builtin_scene, top_down_pose
from pvp.se3 import NoiseParams, Pose, RelPose, apply_action, relative_action
from pvp.sim import COMPLIANT_ROT, TactilePatch, World, WorldState


def random_dense(rng, rate=None, duration=None) -> DenseTrajectory:
    rate = rate if rate is not None else rng.uniform(60.0, 240.0)
    duration = duration if duration is not None else rng.uniform(0.5, 5.0)
    n = max(1, int(round(duration * rate)))
    gaps = rng.uniform(0.5, 1.5, n) / rate
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    entries = [
        (Pose.from_translation(rng.uniform(-1, 1, 3)), float(t)) for t in times
    ]
    return DenseTrajectory(entries, rate)


def brute_force_downsample(d: DenseTrajectory, dt: float):
    times = np.array([t for _, t in d.entries])
    m_bar = int(math.ceil((times[-1] - times[0]) / dt)) if len(times) > 1 else 0
    picks = []
    for k in range(m_bar + 1):
        target = times[0] + k * dt
        dists = np.abs(times - target)
        picks.append(int(np.argmin(dists)))  # argmin takes the earlier index on ties
    return picks


# -- downsampling ---------------------------------------------------------------------


def test_downsample_single_entry():
    d = DenseTrajectory([(Pose.identity(), 0.0)])
    s = downsample(d, 0.2)
    assert len(s) == 1
    np.testing.assert_array_equal(s.poses[0].t, [0, 0, 0])


def test_downsample_length_formula():
    # one second of 120 Hz entries: M_bar = 5, six output poses
    entries = [(Pose.from_translation([0, 0, k / 120.0]), k / 120.0) for k in range(121)]
    s = downsample(DenseTrajectory(entries), 0.2)
    assert len(s) == 6
    for k, p in enumerate(s.poses):
        assert p.t[2] == pytest.approx(k * 0.2, abs=1e-12)


def test_downsample_matches_brute_force_oracle():
    rng = np.random.default_rng(12)
    for _ in range(150):
        d = random_dense(rng)
        dt = float(rng.uniform(0.05, 0.5))
        got = downsample(d, dt)
        picks = brute_force_downsample(d, dt)
        assert len(got) == len(picks)
        for pose, idx in zip(got.poses, picks):
            np.testing.assert_array_equal(pose.t, d.entries[idx][0].t)


def test_downsample_never_extrapolates():
    rng = np.random.default_rng(13)
    d = random_dense(rng)
    member_ts = {tuple(p.t) for p, _ in d.entries}
    for pose in downsample(d, 0.2).poses:
        assert tuple(pose.t) in member_ts


def test_downsample_tie_goes_earlier():
    entries = [
        (Pose.from_translation([1, 0, 0]), 0.0),
        (Pose.from_translation([2, 0, 0]), 0.25),
        (Pose.from_translation([3, 0, 0]), 0.75),
    ]
    # sample point 0.5 is exactly equidistant from 0.25 and 0.75: earlier wins
    s = downsample(DenseTrajectory(entries), 0.5)
    np.testing.assert_array_equal(s.poses[1].t, [2, 0, 0])


def test_dense_trajectory_validation():
    with pytest.raises(ConfigError):
        DenseTrajectory([])
    with pytest.raises(ConfigError):
        DenseTrajectory([(Pose.identity(), 0.5)])  # must start at zero
    with pytest.raises(ConfigError):
        DenseTrajectory([(Pose.identity(), 0.0), (Pose.identity(), 0.0)])


# -- reversal --------------------------------------------------------------------------


def test_reverse_two_identical_poses():
    s = SparseTrajectory([Pose.identity(), Pose.identity()], 0.2)
    acts = reverse_to_actions(s, 1)
    assert len(acts) == 2
    assert acts[0].gripper == 1 and acts[0].is_identity()
    assert acts[1].gripper == 0 and acts[1].is_identity()


def test_reverse_pure_lift_sign_symmetry():
    zs = [0.0, 0.05, 0.10, 0.15]
    s = SparseTrajectory([top_down_pose([0.1, 0.0, z]) for z in zs], 0.2)
    acts = reverse_to_actions(s, 5)
    assert len(acts) == 3 + 5
    moves = acts[:3]
    # top-down tool frame: a world descent is +z in the EE frame
    for a in moves:
        assert a.delta.t[2] == pytest.approx(0.05, abs=1e-12)
        assert a.gripper == 1
    ee = s.poses[-1]
    for a in acts:
        ee = apply_action(ee, a.delta)
    np.testing.assert_allclose(ee.t, s.poses[0].t, atol=1e-12)


def test_reverse_chain_replay_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        poses = [
            Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, 2), rng.uniform(-1, 1, 3))
            for _ in range(8)
        ]
        s = SparseTrajectory(poses, 0.2)
        acts = reverse_to_actions(s, 5)
        ee = poses[-1]
        for a in acts:
            ee = apply_action(ee, a.delta)
        assert np.linalg.norm(ee.t - poses[0].t) < 1e-8


def test_reverse_requires_two_poses():
    with pytest.raises(ConfigError):
        reverse_to_actions(SparseTrajectory([Pose.identity()], 0.2), 5)


# -- augmentation -----------------------------------------------------------------------


def place_line(n: int) -> SparseTrajectory:
    return SparseTrajectory(
        [top_down_pose([0.01 * k, -0.01 * k, 0.35 - 0.01 * k]) for k in range(n)], 0.2
    )


def test_perturb_count_matches_integer_oracle():
    for n in range(1, 401):
        assert perturb_count(n, 0.75) == -((-3 * n) // 4)


def test_augment_split_indices():
    cc = CollectConfig(enable_noise_aug=True)
    rng = np.random.default_rng(0)
    place = place_line(8)
    out = augment_waypoints(place, cc, rng)
    assert len(out) == 8
    for i in range(6):  # ceil(0.75 * 8) = 6 leading poses perturbed
        assert not np.array_equal(out.poses[i].t, place.poses[i].t)
    for i in (6, 7):  # the approach tail is returned bit-identical
        np.testing.assert_array_equal(out.poses[i].t, place.poses[i].t)
        np.testing.assert_array_equal(out.poses[i].q, place.poses[i].q)


def test_augment_split_exact_for_all_lengths():
    cc = CollectConfig(enable_noise_aug=True)
    rng = np.random.default_rng(1)
    for n in range(2, 51):
        place = place_line(n)
        out = augment_waypoints(place, cc, rng)
        cut = -((-3 * n) // 4)
        for i in range(cut, n):
            np.testing.assert_array_equal(out.poses[i].t, place.poses[i].t)
            np.testing.assert_array_equal(out.poses[i].q, place.poses[i].q)
        for i in range(cut):
            assert not np.array_equal(out.poses[i].t, place.poses[i].t)


def test_augment_final_pose_untouched_and_deviation_stats():
    cc = CollectConfig(enable_noise_aug=True)
    rng = np.random.default_rng(2)
    place = place_line(40)
    deviations = []
    for _ in range(300):
        out = augment_waypoints(place, cc, rng)
        np.testing.assert_array_equal(out.poses[-1].t, place.poses[-1].t)
        cut = perturb_count(40, 0.75)
        deviations.extend(
            np.linalg.norm(out.poses[i].t - place.poses[i].t) for i in range(cut)
        )
    # |N3(0, sigma)| has mean sigma * 2 * sqrt(2/pi)
    expect = cc.noise.sigma_t * 2.0 * math.sqrt(2.0 / math.pi)
    assert np.mean(deviations) == pytest.approx(expect, rel=0.05)


# -- clearance sampling -------------------------------------------------------------------


def test_sample_clearance_zero_sigma_exact():
    base = top_down_pose([0.0, 0.0, 0.35])
    out = sample_clearance(base, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.t, base.t)
    np.testing.assert_array_equal(out.q, base.q)


def test_sample_clearance_statistics_and_rotation():
    base = top_down_pose([0.0, 0.0, 0.35])
    rng = np.random.default_rng(4)
    draws = np.array([sample_clearance(base, 0.025, rng).t for _ in range(100_000)])
    stds = (draws - base.t).std(axis=0)
    np.testing.assert_allclose(stds, 0.025, rtol=0.03)
    for _ in range(50):
        np.testing.assert_array_equal(sample_clearance(base, 0.025, rng).q, base.q)
    with pytest.raises(ConfigError):
        sample_clearance(base, -0.1, rng)


# -- tactile regrasp ------------------------------------------------------------------------


def test_tactile_regrasp_correction():
    w = World(builtin_scene("dishrack"))
    assert tactile_regrasp(w, TactilePatch(0.9, np.array([0.009, 0.0]))) is None
    assert tactile_regrasp(w, TactilePatch(0.7, np.array([0.007, 0.0]))) is None
    # centroid 6 mm short of the ideal half-finger reading: sink 6 mm deeper
    corr = tactile_regrasp(w, TactilePatch(0.5, np.array([0.004, 0.0])))
    np.testing.assert_allclose(corr.t, [0.0, 0.0, 0.006], atol=1e-15)
    assert np.all(corr.w == 0.0)


def test_tactile_regrasp_recovers_in_one_correction():
    # worst shallow draw: depth 0.42 * finger -> corrected to (0.42+1)/2 = 0.71
    cfg = builtin_scene("dishrack")
    w = World(cfg)
    cc = CollectConfig()
    found = 0
    for seed in range(200):
        ep, tel = run_pvp_episode(cfg, cc, seed=seed)
        assert tel.regrasp_count <= 1
        if tel.regrasp_count == 1:
            found += 1
            assert ep.metadata["grasp_depth"] >= 0.7 * cfg.physics.finger_depth
    assert found > 10  # shallow grasps appear at the configured 12% rate


# -- full episodes ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def nominal_episode():
    cfg = builtin_scene("dishrack")
    return run_pvp_episode(cfg, CollectConfig(), seed=7)


def test_episode_shape_invariants(nominal_episode):
    ep, tel = nominal_episode
    assert tel.outcome and tel.causes() == []
    assert len(ep.frames) == len(ep.actions) + 1
    assert ep.metadata["length"] == len(ep.actions)
    n = CollectConfig().n_tail
    for a in ep.actions[-n:]:
        assert a.gripper == 0 and a.is_identity()
    for a in ep.actions[:-n]:
        assert a.gripper == 1
    assert ep.metadata["outcome"] is True
    assert ep.metadata["source"] == "pvp"


def test_episode_tuples_and_stacking(nominal_episode):
    ep, _ = nominal_episode
    tuples = ep.tuples
    assert len(tuples) == len(ep.actions)
    first = ep.stacked(0)
    assert first.raster.shape == (32, 32, 12)
    for k in range(4):  # no history yet: first frame replicated
        np.testing.assert_array_equal(
            first.raster[:, :, 3 * k: 3 * k + 3], ep.frames[0].raster
        )
    mid = ep.stacked(5)
    for k, j in enumerate((2, 3, 4, 5)):  # oldest first, current last
        np.testing.assert_array_equal(
            mid.raster[:, :, 3 * k: 3 * k + 3], ep.frames[j].raster
        )
    np.testing.assert_array_equal(mid.proprio, ep.frames[5].proprio)


def test_episode_deterministic():
    cfg = builtin_scene("dishrack")
    a, _ = run_pvp_episode(cfg, CollectConfig(), seed=11)
    b, _ = run_pvp_episode(cfg, CollectConfig(), seed=11)
    assert len(a) == len(b)
    for x, y in zip(a.actions, b.actions):
        np.testing.assert_array_equal(x.delta.as_vector(), y.delta.as_vector())
        assert x.gripper == y.gripper
    for fx, fy in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fx.raster, fy.raster)
        np.testing.assert_array_equal(fx.proprio, fy.proprio)


def replay_from_metadata(cfg, ep):
    """Open-loop execution of the stored actions in a fresh world."""
    md = ep.metadata
    world = World(cfg)
    start_ee = Pose(np.array(md["start_ee"][:4]), np.array(md["start_ee"][4:]))
    offset = Pose(np.array(md["grasp_offset"][:4]), np.array(md["grasp_offset"][4:]))
    poses = {o.label: o.goal.copy() for o in cfg.objects}
    poses[md["target"]] = start_ee.compose(offset)
    s = WorldState(
        ee=start_ee,
        gripper_open=False,
        attached=md["target"],
        grasp_offset=offset,
        grasp_depth=md["grasp_depth"],
        object_poses=poses,
    )
    for a in ep.actions:
        s = world.step(s, a.delta, a.gripper, COMPLIANT_ROT)
    return world, s


def test_reversal_consistency_self_supervision():
    # the stored actions alone must reproduce the placement in a fresh world
    cfg = builtin_scene("dishrack")
    for seed in (0, 5, 9):
        ep, tel = run_pvp_episode(cfg, CollectConfig(), seed=seed)
        assert tel.outcome
        world, s = replay_from_metadata(cfg, ep)
        goal = cfg.by_label(ep.metadata["target"]).goal
        assert world.check_success(s, goal)
        pos_err, rot_err = world.placement_error(s, ep.metadata["target"], goal)
        assert pos_err <= cfg.physics.eps_pos
        assert rot_err <= cfg.physics.eps_rot


def test_noise_augmented_episode_still_places(nominal_episode):
    cfg = builtin_scene("dishrack")
    cc = CollectConfig(enable_noise_aug=True)
    clean_ep, _ = nominal_episode
    for seed in (7, 21):
        ep, tel = run_pvp_episode(cfg, cc, seed=seed)
        assert tel.outcome
        assert ep.metadata["noise_augmented"] is True
        n = cc.n_tail
        for a in ep.actions[-n:]:
            assert a.gripper == 0 and a.is_identity()
    # same seed: augmentation changes the motion actions
    aug_ep, _ = run_pvp_episode(cfg, cc, seed=7)
    assert len(aug_ep) == len(clean_ep)
    diffs = [
        not np.array_equal(a.delta.as_vector(), b.delta.as_vector())
        for a, b in zip(aug_ep.actions, clean_ep.actions)
    ]
    assert any(diffs)


def test_ccg_keeps_preload_subcritical():
    cfg = builtin_scene("dishrack")
    cc = CollectConfig()
    for seed in range(30):
        _, tel = run_pvp_episode(cfg, cc, seed=seed)
        assert tel.preload_peak < cfg.physics.preload_crit


def test_naive_collection_produces_failures():
    cfg = builtin_scene("dishrack")
    cc = CollectConfig(enable_ccg=False, enable_tr=False)
    tels = [run_pvp_episode(cfg, cc, seed=s)[1] for s in range(64)]
    failures = [t for t in tels if not t.outcome]
    assert len(failures) >= 2
    causes = {c for t in failures for c in t.causes()}
    assert causes <= {"wedge_shift", "slip", "misplacement"}
    # stiff closing on a constrained object stores supercritical preload sometimes
    assert any(t.preload_peak > cfg.physics.preload_crit for t in tels)


def test_table_scene_collects_too():
    cfg = builtin_scene("table")
    ep, tel = run_pvp_episode(cfg, CollectConfig(), seed=1)
    assert tel.outcome
    assert ep.metadata["target"] in ("wood bowl", "steel cup")


# -- kinesthetic generator ---------------------------------------------------------------------


def test_kinesthetic_sanity_mode_reduces_to_place_trajectory():
    cfg = builtin_scene("dishrack")
    cc = CollectConfig()
    pvp_ep, _ = run_pvp_episode(cfg, cc, seed=13)
    kin_ep, _ = run_kinesthetic_episode(cfg, seed=13, cc=cc, kc=KinestheticConfig().zeroed())
    assert len(kin_ep) == len(pvp_ep)
    for a, b in zip(kin_ep.actions, pvp_ep.actions):
        np.testing.assert_array_equal(a.delta.as_vector(), b.delta.as_vector())
        assert a.gripper == b.gripper


def test_kinesthetic_episode_invariants():
    cfg = builtin_scene("dishrack")
    n_tail = CollectConfig().n_tail
    idle_count = 0
    for seed in range(25):
        ep, tel = run_kinesthetic_episode(cfg, seed=seed)
        assert tel.outcome
        assert ep.metadata["source"] == "kinesthetic"
        for a in ep.actions[-n_tail:]:
            assert a.gripper == 0 and a.is_identity()
        moves = ep.actions[:-n_tail]
        assert all(a.gripper == 1 for a in moves)
        if any(a.is_identity() for a in moves):
            idle_count += 1
    assert idle_count >= 20  # pauses in at least 80% of demonstrations


def test_kinesthetic_episodes_run_longer():
    cfg = builtin_scene("dishrack")
    pvp = [len(run_pvp_episode(cfg, CollectConfig(), seed=s)[0]) for s in range(20)]
    kin = [len(run_kinesthetic_episode(cfg, seed=s)[0]) for s in range(20)]
    assert np.mean(kin) > np.mean(pvp) + 5


# -- config validation ---------------------------------------------------------------------------


def test_collect_config_validation():
    with pytest.raises(ConfigError):
        CollectConfig(dt=0.0)
    with pytest.raises(ConfigError):
        CollectConfig(noise_fraction=1.5)
    with pytest.raises(ConfigError):
        CollectConfig(n_tail=0)
    with pytest.raises(ConfigError):
        CollectConfig(sigma_tr=-0.01)
    with pytest.raises(ConfigError):
        CollectConfig(retrieve_speed=0.0)
    with pytest.raises(ConfigError):
        Action(RelPose(), 2)
    with pytest.raises(ConfigError):
        Action(RelPose(t=np.array([np.nan, 0, 0])), 1)
