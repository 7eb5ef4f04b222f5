"""Command-line front end: collect, train, eval, ablate, and stats subcommands.

Every stochastic subcommand takes explicit seeds; nothing falls back to the
wall clock, so a fixed command line reproduces its output files byte for byte
(suppress the report footer with --no-timestamps). A JSON config file can
pre-fill any flag of the chosen subcommand, and explicit flags win over the
file. The PVP_OUT_ROOT environment variable relocates relative output
directories and nothing else.

Exit codes: 0 success, 2 configuration problems, 3 I/O or data corruption.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from pvp.collect import CollectConfig, KinestheticConfig, run_kinesthetic_episode, run_pvp_episode
from pvp.dataset import (
    DatasetWriter,
    IntegrityError,
    MANIFEST_NAME,
    RECORDS_NAME,
    StorageError,
    dataset_stats,
    read_all,
    stats_text,
    verify_dataset,
)
from pvp.experiments import (
    EvalReport,
    ablate_noise,
    ablate_robustness,
    collect_episodes,
    compare_kinesthetic,
    derive_seed,
    evaluate_policy,
)
from pvp.policy import (
    TrainConfig,
    TrainingError,
    WeightsError,
    history_text,
    load_params,
    save_params,
    train,
)
from pvp.scene import ConfigError, SceneConfig, builtin_scene


# -- argument plumbing --------------------------------------------------------------------


def _csv_ints(text: str) -> list:
    try:
        vals = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise ConfigError("empty integer list")
    return vals


def _add_scene_flags(p):
    p.add_argument("--scene", default="dishrack",
                   help="builtin scene name (dishrack or table)")
    p.add_argument("--scene-file", default=None,
                   help="JSON scene config; overrides --scene")
    p.add_argument("--scene-seed", type=int, default=0,
                   help="seed for builtin scene layout")


def _add_common_flags(p):
    p.add_argument("--config", default=None,
                   help="JSON file of flag defaults for this subcommand")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="print a progress counter")


def _add_train_flags(p, required_seed: bool):
    p.add_argument("--seed", type=int, default=None, required=False,
                   help="training seed" + ("" if required_seed else " base"))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--step-decay", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--sigma-eval", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pvp",
        description="Contact-aware pick-and-place data generation, "
                    "behaviour cloning, and seeded ablation studies.",
    )
    subs = parser.add_subparsers(dest="subcommand", required=True)
    submap = {}

    pc = subs.add_parser("collect", help="record seeded episodes into a dataset")
    _add_scene_flags(pc)
    _add_common_flags(pc)
    pc.add_argument("--episodes", type=int, default=None, help="episode count")
    pc.add_argument("--seed", type=int, default=None, help="collection seed")
    pc.add_argument("--source", choices=("pvp", "kinesthetic"), default="pvp")
    pc.add_argument("--ccg", action=argparse.BooleanOptionalAction, default=True,
                    help="compliant grasping")
    pc.add_argument("--tr", action=argparse.BooleanOptionalAction, default=True,
                    help="tactile regrasping")
    pc.add_argument("--noise-aug", action=argparse.BooleanOptionalAction,
                    default=False, help="waypoint noise augmentation")
    pc.add_argument("--keep-failed", action="store_true",
                    help="store empty episodes for failed grasps too")
    pc.add_argument("--jobs", type=int, default=1,
                    help="concurrent collection workers (output is ordered "
                         "either way)")
    submap[("collect",)] = pc

    pt = subs.add_parser("train", help="behaviour-clone a policy from a dataset")
    _add_common_flags(pt)
    pt.add_argument("--data", default=None, help="dataset directory")
    _add_train_flags(pt, required_seed=True)
    pt.add_argument("--modes", type=int, default=None, help="mixture components")
    pt.add_argument("--det-equiv", action="store_true",
                    help="single fixed-variance mode (mean-regression head)")
    submap[("train",)] = pt

    pe = subs.add_parser("eval", help="closed-loop success rate of saved weights")
    _add_scene_flags(pe)
    _add_common_flags(pe)
    pe.add_argument("--weights", default=None, help="policy parameter file")
    pe.add_argument("--rollouts", type=int, default=20)
    pe.add_argument("--seed", type=int, default=None, help="evaluation seed")
    pe.add_argument("--name", default="eval", help="report base name")
    pe.add_argument("--no-timestamps", action="store_true",
                    help="omit runtime/date footer for byte-stable reports")
    submap[("eval",)] = pe

    pa = subs.add_parser("ablate", help="rerun one of the three studies")
    asubs = pa.add_subparsers(dest="study", required=True)

    par = asubs.add_parser("robustness", help="failure counts by grasp mode")
    _add_scene_flags(par)
    _add_common_flags(par)
    par.add_argument("--seeds", type=_csv_ints, default=None,
                     help="comma-separated seeds")
    par.add_argument("--episodes", type=int, default=128)
    par.add_argument("--no-timestamps", action="store_true")
    submap[("ablate", "robustness")] = par

    pan = asubs.add_parser("noise", help="augmentation x action-head grid")
    _add_scene_flags(pan)
    _add_common_flags(pan)
    pan.add_argument("--seeds", type=_csv_ints, default=None)
    pan.add_argument("--episodes", type=int, default=128)
    pan.add_argument("--rollouts", type=int, default=20)
    pan.add_argument("--collect-seed", type=int, default=97)
    _add_train_flags(pan, required_seed=False)
    pan.add_argument("--no-timestamps", action="store_true")
    submap[("ablate", "noise")] = pan

    pak = asubs.add_parser("comparison",
                           help="retrieval-reversal vs hand-guided data")
    _add_scene_flags(pak)
    _add_common_flags(pak)
    pak.add_argument("--seeds", type=_csv_ints, default=None)
    pak.add_argument("--sizes", type=_csv_ints, default=None,
                     help="dataset sizes, default 16,32,64,128")
    pak.add_argument("--rollouts", type=int, default=8)
    pak.add_argument("--collect-seed", type=int, default=101)
    _add_train_flags(pak, required_seed=False)
    pak.add_argument("--no-timestamps", action="store_true")
    submap[("ablate", "comparison")] = pak

    ps = subs.add_parser("stats", help="verify a dataset and print its stats")
    _add_common_flags(ps)
    ps.add_argument("--data", default=None, help="dataset directory")
    submap[("stats",)] = ps

    return parser, submap


def _scan_config_path(argv) -> str:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return ""


def _scan_subcommand(argv) -> tuple:
    words = [t for t in argv if not t.startswith("-")]
    if words and words[0] == "ablate":
        return tuple(words[:2])
    return tuple(words[:1])


def _apply_config_file(argv, submap):
    """Load --config JSON as subcommand defaults; explicit flags still win."""
    path = _scan_config_path(argv)
    if not path:
        return
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    target = submap.get(_scan_subcommand(argv))
    if target is None:
        raise ConfigError("config file given without a recognizable subcommand")
    valid = {a.dest for a in target._actions}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigError(f"config keys not recognized by this subcommand: {unknown}")
    if "seeds" in data and isinstance(data["seeds"], list):
        data["seeds"] = [int(v) for v in data["seeds"]]
    target.set_defaults(**data)


# -- shared helpers -------------------------------------------------------------------------


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required "
                              "(flag or config file)")


def _out_dir(args, default_name: str) -> Path:
    root = os.environ.get("PVP_OUT_ROOT", "")
    out = Path(args.out) if args.out else Path(default_name)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene(args) -> SceneConfig:
    if getattr(args, "scene_file", None):
        p = Path(args.scene_file)
        if not p.exists():
            raise ConfigError(f"scene file not found: {p}")
        return SceneConfig.load(p)
    return builtin_scene(args.scene, seed=args.scene_seed)


def _train_config(args, seed: int) -> TrainConfig:
    overrides = {}
    for field in ("epochs", "batch_size", "step_size", "step_decay",
                  "momentum", "hidden", "val_fraction", "sigma_eval"):
        v = getattr(args, field, None)
        if v is not None:
            overrides[field] = v
    if getattr(args, "modes", None) is not None:
        overrides["modes"] = args.modes
    if getattr(args, "det_equiv", False):
        overrides["modes"] = overrides.get("modes", 1)
        overrides["det_equiv"] = True
    return TrainConfig(seed=seed, **overrides)


def _progress(args, i: int, n: int):
    if args.verbose and (i + 1) % 16 == 0:
        print(f"  {i + 1}/{n}", file=sys.stderr)


# -- collect -----------------------------------------------------------------------------


def _collect_one(payload):
    scene_json, cc_dict, source, ep_seed = payload
    cfg = SceneConfig.from_json_dict(scene_json)
    cc = CollectConfig(**cc_dict)
    if source == "pvp":
        return run_pvp_episode(cfg, cc, seed=ep_seed)
    return run_kinesthetic_episode(cfg, seed=ep_seed, cc=cc)


def cmd_collect(args) -> int:
    _require(args, "episodes", "seed")
    if args.episodes < 1:
        raise ConfigError("--episodes must be at least 1")
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    cfg = _load_scene(args)
    cc = CollectConfig(enable_ccg=args.ccg, enable_tr=args.tr,
                       enable_noise_aug=args.noise_aug)
    out = _out_dir(args, "dataset")

    stream = {"pvp": 11, "kinesthetic": 13}[args.source]
    seeds = [derive_seed(args.seed, stream, i) for i in range(args.episodes)]
    if args.jobs == 1:
        pairs = []
        for i, ep_seed in enumerate(seeds):
            if args.source == "pvp":
                pairs.append(run_pvp_episode(cfg, cc, seed=ep_seed))
            else:
                pairs.append(run_kinesthetic_episode(cfg, seed=ep_seed, cc=cc))
            _progress(args, i, args.episodes)
    else:
        payloads = [(cfg.to_json_dict(), cc.__dict__.copy(), args.source, s)
                    for s in seeds]
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            pairs = list(ex.map(_collect_one, payloads))

    telemetry = []
    kept = skipped = 0
    with DatasetWriter(out, scene_hash=cfg.content_hash()) as writer:
        for ep, tel in pairs:
            telemetry.append({
                "seed": tel.seed, "target": tel.target,
                "outcome": tel.outcome, "causes": tel.causes(),
                "preload_peak": round(tel.preload_peak, 6),
                "regrasp_count": tel.regrasp_count, "length": tel.length,
            })
            if len(ep.actions) > 0 or args.keep_failed:
                writer.write_episode(ep)
                kept += 1
            else:
                skipped += 1
    tel_path = out / "telemetry.json"
    tel_path.write_text(json.dumps(telemetry, indent=1, sort_keys=True) + "\n")

    failures = sum(1 for t in telemetry if not t["outcome"])
    for name in (RECORDS_NAME, MANIFEST_NAME):
        print(out / name)
    print(tel_path)
    print(f"collected {kept} episodes ({skipped} failed grasps skipped, "
          f"{failures} failures logged) into {out}")
    return 0


# -- train -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    _require(args, "data", "seed")
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise ConfigError(f"dataset directory not found: {data_dir}")
    if getattr(args, "modes", None) is not None and args.modes not in (1, 5):
        raise ConfigError("--modes must be 1 or 5")
    episodes = read_all(data_dir)
    tc = _train_config(args, args.seed)
    params, history = train(episodes, tc)
    out = _out_dir(args, "model")
    weights = out / "policy.pvpw"
    save_params(weights, params)
    hist_path = out / "history.tsv"
    hist_path.write_text(history_text(history))
    print(weights)
    print(hist_path)
    final = history[-1]
    print(f"trained {tc.epochs} epochs on {len(episodes)} episodes; "
          f"final train nll {final[1]:.4f}, val nll {final[2]:.4f}")
    return 0


# -- eval ---------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    _require(args, "weights", "seed")
    wpath = Path(args.weights)
    if not wpath.exists():
        raise ConfigError(f"weights file not found: {wpath}")
    if args.rollouts < 1:
        raise ConfigError("--rollouts must be at least 1")
    cfg = _load_scene(args)
    params = load_params(wpath)
    ev = evaluate_policy(cfg, params, args.rollouts, args.seed)
    report = EvalReport(
        name=args.name,
        config={"weights": str(wpath), "rollouts": args.rollouts,
                "seed": args.seed, "scene": cfg.content_hash()},
    )
    report.rows = [{"rollout": j, "success": int(o)}
                   for j, o in enumerate(ev["outcomes"])]
    report.summary = {"k": ev["k"], "n": ev["n"],
                      "rate": round(ev["rate"], 2),
                      "mean_steps": round(ev["mean_steps"], 2)}
    out = _out_dir(args, "eval")
    for p in report.save(out, plot_columns=["rollout", "success"],
                         no_timestamps=args.no_timestamps):
        print(p)
    print(f"success {ev['k']}/{ev['n']} ({ev['rate']:.1f}%)")
    return 0


# -- ablate -------------------------------------------------------------------------------


def _maybe_tc_base(args):
    fields = ("epochs", "batch_size", "step_size", "step_decay", "momentum",
              "hidden", "val_fraction", "sigma_eval")
    if all(getattr(args, f, None) is None for f in fields):
        return None
    return _train_config(args, seed=0)


def cmd_ablate(args) -> int:
    _require(args, "seeds")
    cfg = _load_scene(args)
    if args.study == "robustness":
        report = ablate_robustness(cfg, seeds=args.seeds, episodes=args.episodes)
        columns = ["condition", "seed", "failures"]
    elif args.study == "noise":
        report = ablate_noise(cfg, seeds=tuple(args.seeds),
                              episodes=args.episodes, rollouts=args.rollouts,
                              collect_seed=args.collect_seed,
                              tc_base=_maybe_tc_base(args))
        columns = ["head", "noise_aug", "seed", "rate"]
    else:
        sizes = tuple(args.sizes) if args.sizes else (16, 32, 64, 128)
        report = compare_kinesthetic(cfg, sizes=sizes, seeds=tuple(args.seeds),
                                     rollouts=args.rollouts,
                                     collect_seed=args.collect_seed,
                                     tc_base=_maybe_tc_base(args))
        columns = ["source", "size", "seed", "rate"]
    out = _out_dir(args, args.study)
    for p in report.save(out, plot_columns=columns,
                         no_timestamps=args.no_timestamps):
        print(p)
    print(f"{report.name}: " + " ".join(
        f"{k}={v}" for k, v in report.summary.items()))
    return 0


# -- stats --------------------------------------------------------------------------------


def cmd_stats(args) -> int:
    _require(args, "data")
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise ConfigError(f"dataset directory not found: {data_dir}")
    n = verify_dataset(data_dir)
    stats = dataset_stats(data_dir)
    sys.stdout.write(stats_text(stats))
    print(f"verified {n} records, success rate {stats['success_rate']:.3f}")
    return 0


# -- entry point ---------------------------------------------------------------------------


def _dispatch(args) -> int:
    cmd = {
        "collect": cmd_collect,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "stats": cmd_stats,
    }[args.subcommand]
    return cmd(args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, submap = build_parser()
    try:
        _apply_config_file(argv, submap)
        args = parser.parse_args(argv)
        return _dispatch(args)
    except (ConfigError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (StorageError, IntegrityError, WeightsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
