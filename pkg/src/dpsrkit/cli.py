"""Command-line interface.

Value precedence for every option: command-line flag, then the JSON file given
with --config, then the built-in default.  The seed falls back to the
DPSRKIT_SEED environment variable when neither flag nor config sets it.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evalmetrics as em
from .composite import (
    DEFAULT_SOURCE_WEIGHTS,
    CompositeNet,
    PartSplit,
    build_mixture_schedule,
    composite_from_bytes,
    composite_to_bytes,
    source_pools,
    train_fused,
    train_mixed,
)
from .diffusion import NoiseNet, TrainConfig, net_from_bytes, net_to_bytes, sample_ddim, sample_em, train
from .diffusion.checkpoint import CheckpointError, checkpoint_kind
from .kinematics import Camera, KinematicTree, NonPositiveDepth, default_tree, forward_kinematics, project_perspective
from .numerics import Rng
from .prior import TASK_INTERVALS, TASK_ITERS, TASK_LAM, PriorConfig, SchedulePolicy, ablation_policies
from .synthdata import Dataset, ImprobableObservation, MixtureSpec, default_spec, make_splits, sample_gt_sequence
from .tasks import (
    CompletionProblem,
    Fit2DProblem,
    IKProblem,
    MaskSpec,
    MotionProblem,
    RobustifierConfig,
    run_multi_hypothesis,
)

log = logging.getLogger("dpsrkit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


COMMON = {"seed": None, "out": "out", "model": None, "jobs": 1}

DEFAULTS = {
    "gen-data": {"spec": "default", "n": 20000, "val_frac": 0.1, "test_frac": 0.1},
    "train": {
        "data": None, "part": "whole", "variant": None, "body": None, "hand": None, "face": None,
        "iters": 20000, "batch": 256, "lr": 1e-3, "lr_final": 1e-5, "hidden": 256, "blocks": 2,
        "fused_hidden": 256, "source_weights": list(DEFAULT_SOURCE_WEIGHTS),
    },
    "sample": {"ckpt": None, "sampler": "em", "steps": 1000, "start_t": 1.0, "n": 100},
    "complete": {
        "ckpt": None, "data": None, "index": 0, "hide": "right_hand", "hyp": 10, "iters": TASK_ITERS["completion"],
        "lr": 0.05, "lam_reg": TASK_LAM["completion"], "mode": "truncated", "t_max": None, "t_min": None,
    },
    "ik": {
        "ckpt": None, "data": None, "index": 0, "known": "tips", "noise": 0.0, "hyp": 10, "iters": TASK_ITERS["ik"],
        "lr": 0.05, "lam_reg": TASK_LAM["ik"], "mode": "truncated", "t_max": None, "t_min": None,
    },
    "fit2d": {
        "ckpt": None, "data": None, "index": 0, "occlude": 0.3, "pixel_noise": 0.0, "hyp": 1, "iters": TASK_ITERS["fit2d"],
        "lr": 0.05, "lam_reg": TASK_LAM["fit2d"], "w_beta": 1.0, "gm_scale": 100.0, "data_scale": 1e-3, "mode": "truncated", "t_max": None, "t_min": None,
    },
    "denoise-motion": {
        "ckpt": None, "spec": "default", "frames": 60, "rate": 0.1, "noise": 0.04, "w_temp": 0.5, "iters": TASK_ITERS["motion"],
        "lr": 0.05, "lam_reg": TASK_LAM["motion"], "mode": "truncated", "t_max": None, "t_min": None,
    },
    "eval": {"samples": None, "data": None, "k": 3, "ckpt": None},
    "ablate-schedule": {
        "task": "complete", "ckpt": None, "data": None, "cases": 5, "hyp": 10, "iters": TASK_ITERS["completion"], "lr": 0.05,
        "lam_reg": TASK_LAM["completion"],
        "hide": "right_hand",
    },
}

TASK_PRESET = {"complete": "completion", "ik": "ik", "fit2d": "fit2d", "denoise-motion": "motion"}


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dpsrkit",
        description="Diffusion pose prior: data generation, training, sampling and test-time optimization.",
        epilog="Precedence: flags > --config JSON > defaults; seed falls back to $DPSRKIT_SEED.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")
    for cmd, opts in DEFAULTS.items():
        sp = sub.add_parser(cmd, help=f"{cmd} (defaults: see --help)")
        sp.add_argument("--config", help="JSON file of option values")
        for key, default in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            kind = type(default) if default is not None and not isinstance(default, list) else None
            if isinstance(default, bool):
                sp.add_argument(flag, dest=key, default=None, type=lambda s: s.lower() in ("1", "true", "yes"))
            elif isinstance(default, list):
                sp.add_argument(flag, dest=key, default=None, type=float, nargs="+")
            else:
                sp.add_argument(flag, dest=key, default=None, type=kind or str, help=f"default: {default}")
    return p


def resolve(cmd: str, ns: argparse.Namespace) -> dict:
    cfg = {**COMMON, **DEFAULTS[cmd]}
    if ns.config:
        try:
            file_cfg = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {ns.config}: {e}") from e
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k in cfg:
        v = getattr(ns, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["seed"] is None:
        env = os.environ.get("DPSRKIT_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError as e:
            raise ConfigError(f"DPSRKIT_SEED must be an integer, got {env!r}") from e
    cfg["seed"] = int(cfg["seed"])
    return cfg


def _tree(cfg) -> KinematicTree:
    return default_tree() if cfg["model"] is None else KinematicTree.load(cfg["model"])


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_model(path):
    """Part/whole NoiseNet or composite checkpoint."""
    data = Path(path).read_bytes()
    return composite_from_bytes(data) if checkpoint_kind(data) == "composite" else net_from_bytes(data)


def _spec(cfg, tree) -> MixtureSpec:
    return default_spec(tree) if cfg["spec"] == "default" else MixtureSpec.load(cfg["spec"])


def _policy(cfg, task: str) -> SchedulePolicy:
    hi, lo = TASK_INTERVALS[task]
    hi = hi if cfg["t_max"] is None else cfg["t_max"]
    lo = lo if cfg["t_min"] is None else cfg["t_min"]
    if cfg["mode"] in ("uniform", "random") and cfg["t_max"] is None:
        return SchedulePolicy.for_task(task, cfg["iters"], cfg["mode"])
    if cfg["mode"] == "fixed" and cfg["t_max"] is None:
        return SchedulePolicy.for_task(task, cfg["iters"], "fixed")
    return SchedulePolicy(cfg["mode"], hi, lo, cfg["iters"])


def _prior_cfg(cfg) -> PriorConfig:
    return PriorConfig(lam_reg=cfg["lam_reg"], lr=cfg["lr"], iters=cfg["iters"], seed=cfg["seed"])


class Run:
    """Output directory bookkeeping and manifest writing."""

    def __init__(self, cmd: str, cfg: dict):
        self.cmd, self.cfg = cmd, cfg
        # created on first write so failed commands leave nothing behind
        self.out = Path(cfg["out"])
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def input(self, path):
        if path is not None and path != "default":
            self.inputs[str(path)] = _sha(path)
        return path

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def wrote(self, name: str) -> None:
        self.outputs[name] = _sha(self.out / name)

    def finish(self) -> None:
        manifest = {
            "command": self.cmd,
            "version": __version__,
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def cmd_gen_data(run: Run, cfg: dict) -> None:
    tree = _tree(cfg)
    run.input(cfg["model"])
    spec = _spec(cfg, tree)
    run.input(cfg["spec"])
    splits = make_splits(spec, int(cfg["n"]), cfg["seed"], cfg["val_frac"], cfg["test_frac"])
    spec.save(run.path("spec.json"))
    run.wrote("spec.json")
    for name, ds in splits.items():
        ds.save(run.path(f"{name}.dpsd"))
        run.wrote(f"{name}.dpsd")


def _part_data(part: str, x: np.ndarray, tree: KinematicTree) -> np.ndarray:
    rng = tree.part_ranges()
    if part == "whole":
        return x
    if part == "hand":
        a, b = rng["left_hand"]
        c, d = rng["right_hand"]
        m = tree.hand_mirror_signs()
        out = np.empty((2 * x.shape[0], b - a))
        out[0::2], out[1::2] = x[:, a:b], x[:, c:d] * m
        return out
    if part in ("body", "face"):
        a, b = rng[part]
        return x[:, a:b]
    raise ConfigError(f"unknown part {part!r}; expected whole, body, hand or face")


def cmd_train(run: Run, cfg: dict) -> None:
    _require(cfg, "data")
    tree = _tree(cfg)
    ds = Dataset.load(run.input(cfg["data"]))
    rng = Rng(cfg["seed"])
    tcfg = TrainConfig(batch_size=int(cfg["batch"]), iters=int(cfg["iters"]), lr=cfg["lr"], lr_final=cfg["lr_final"], seed=cfg["seed"])
    if cfg["variant"] is None:
        x = _part_data(cfg["part"], ds.data, tree)
        mean, std = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)
        net = NoiseNet.create(x.shape[1], rng.split(0), hidden=int(cfg["hidden"]), blocks=int(cfg["blocks"]), mean=mean, std=std)
        losses = train(net, net.normalize(x), tcfg, rng.split(1))
        blob = net_to_bytes(net)
    else:
        _require(cfg, "body", "hand", "face")
        parts = [net_from_bytes(Path(run.input(cfg[k])).read_bytes()) for k in ("body", "hand", "face")]
        split = PartSplit(tree.part_ranges())
        cnet = CompositeNet.assemble(split, *parts, tree.hand_mirror_signs(), cfg["variant"], rng.split(0), hidden=int(cfg["fused_hidden"]), blocks=int(cfg["blocks"]))
        losses = np.zeros(0)
        if cfg["variant"] == "fused":
            losses = train_fused(cnet, cnet.normalize(ds.data), tcfg, rng.split(1))
        elif cfg["variant"] == "mixed":
            pools = source_pools(cnet, ds.data, rng.split(2))
            sampler = build_mixture_schedule(split, pools, cfg["source_weights"])
            losses = train_mixed(cnet, sampler, tcfg, rng.split(1))
        blob = composite_to_bytes(cnet)
    run.path("model.dpsr").write_bytes(blob)
    run.wrote("model.dpsr")
    _write_rows(run.path("losses.csv"), ["iter", "loss"], [[i, repr(float(v))] for i, v in enumerate(losses)])
    run.wrote("losses.csv")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_poses(path, poses) -> None:
    poses = np.asarray(poses).reshape(-1, np.asarray(poses).shape[-1])
    _write_rows(path, [f"x{i}" for i in range(poses.shape[1])], [[repr(float(v)) for v in row] for row in poses])


def _read_poses(path) -> np.ndarray:
    if str(path).endswith(".dpsd"):
        return Dataset.load(path).data
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]])


def cmd_sample(run: Run, cfg: dict) -> None:
    _require(cfg, "ckpt")
    net = _load_model(run.input(cfg["ckpt"]))
    rng = Rng(cfg["seed"])
    n, steps = int(cfg["n"]), int(cfg["steps"])
    if cfg["sampler"] == "em":
        x = sample_em(net, net.schedule, steps, rng, n)
    elif cfg["sampler"] == "ddim":
        x = sample_ddim(net, net.schedule, steps, rng, n, start_t=cfg["start_t"])
    else:
        raise ConfigError(f"unknown sampler {cfg['sampler']!r}")
    _write_poses(run.path("samples.csv"), x)
    run.wrote("samples.csv")


def _hyp_outputs(run: Run, hs, extra: dict | None = None) -> None:
    hs.write_csv(run.path("hypotheses.csv"))
    run.wrote("hypotheses.csv")
    run.path("result.json").write_text(hs.to_json())
    run.wrote("result.json")
    stats = dict(hs.stats(), **(extra or {}))
    run.path("stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    run.wrote("stats.json")


def _test_pose(run: Run, cfg) -> np.ndarray:
    _require(cfg, "ckpt", "data")
    ds = Dataset.load(run.input(cfg["data"]))
    idx = int(cfg["index"])
    if not 0 <= idx < ds.data.shape[0]:
        raise ConfigError(f"index {idx} outside dataset of {ds.data.shape[0]} rows")
    return ds.data[idx]


def completion_problem(tree: KinematicTree, gt: np.ndarray, hide: str) -> CompletionProblem:
    ranges = tree.part_ranges()
    if hide not in ranges:
        raise ConfigError(f"unknown part {hide!r} for --hide")
    mask = MaskSpec.hiding(tree.pose_dim, *ranges[hide])
    return CompletionProblem(mask, gt[mask.observed])


def cmd_complete(run: Run, cfg: dict) -> None:
    tree = _tree(cfg)
    gt = _test_pose(run, cfg)
    net = _load_model(run.input(cfg["ckpt"]))
    prob = completion_problem(tree, gt, cfg["hide"])
    hs = run_multi_hypothesis(prob, int(cfg["hyp"]), net, _policy(cfg, "completion"), _prior_cfg(cfg), Rng(cfg["seed"]), gt, tree, int(cfg["jobs"]))
    _hyp_outputs(run, hs)


def ik_problem(tree: KinematicTree, gt: np.ndarray, known: str, noise: float, rng: Rng) -> IKProblem:
    target = forward_kinematics(tree, gt)
    if noise > 0:
        target = target + noise * rng.normal(target.shape)
    if known == "all":
        idx = np.arange(tree.n_joints)
    elif known == "tips":
        idx = np.array([j for j in range(tree.n_joints) if j not in set(tree.parents)])
    else:
        raise ConfigError(f"--known must be 'all' or 'tips', got {known!r}")
    return IKProblem(tree, target, idx)


def cmd_ik(run: Run, cfg: dict) -> None:
    tree = _tree(cfg)
    gt = _test_pose(run, cfg)
    net = _load_model(run.input(cfg["ckpt"]))
    rng = Rng(cfg["seed"])
    prob = ik_problem(tree, gt, cfg["known"], float(cfg["noise"]), rng.split(1000))
    hs = run_multi_hypothesis(prob, int(cfg["hyp"]), net, _policy(cfg, "ik"), _prior_cfg(cfg), rng, gt, tree, int(cfg["jobs"]))
    _hyp_outputs(run, hs)


def fit2d_problem(tree: KinematicTree, gt: np.ndarray, occlude: float, pixel_noise: float, rng: Rng, **kw) -> Fit2DProblem:
    cam = Camera()
    kp = project_perspective(cam, forward_kinematics(tree, gt))
    if pixel_noise > 0:
        kp = kp + pixel_noise * rng.normal(kp.shape)
    conf = np.ones(tree.n_joints)
    n_occ = int(round(occlude * tree.n_joints))
    conf[rng.permutation(tree.n_joints)[:n_occ]] = 0.0
    return Fit2DProblem(tree, cam, kp, conf, **kw)


def cmd_fit2d(run: Run, cfg: dict) -> None:
    tree = _tree(cfg)
    gt = _test_pose(run, cfg)
    net = _load_model(run.input(cfg["ckpt"]))
    rng = Rng(cfg["seed"])
    prob = fit2d_problem(
        tree, gt, float(cfg["occlude"]), float(cfg["pixel_noise"]), rng.split(1000),
        robust=RobustifierConfig("geman-mcclure", float(cfg["gm_scale"])), w_beta=float(cfg["w_beta"]), data_scale=float(cfg["data_scale"]),
    )
    hs = run_multi_hypothesis(prob, int(cfg["hyp"]), net, _policy(cfg, "fit2d"), _prior_cfg(cfg), rng, gt, tree, int(cfg["jobs"]), aligned=True)
    _hyp_outputs(run, hs)


def motion_problem(tree: KinematicTree, spec: MixtureSpec, frames: int, rate: float, noise: float, rng: Rng, w_temp: float = 0.5):
    gt = sample_gt_sequence(spec, frames, rate, rng.split(0))
    clean = forward_kinematics(tree, gt)
    obs = clean + noise * rng.split(1).normal(clean.shape)
    return MotionProblem(tree, obs, np.ones(tree.n_joints), w_temp), gt


def cmd_denoise_motion(run: Run, cfg: dict) -> None:
    _require(cfg, "ckpt")
    tree = _tree(cfg)
    net = _load_model(run.input(cfg["ckpt"]))
    spec = _spec(cfg, tree)
    run.input(cfg["spec"])
    rng = Rng(cfg["seed"])
    prob, gt = motion_problem(tree, spec, int(cfg["frames"]), float(cfg["rate"]), float(cfg["noise"]), rng.split(1000), float(cfg["w_temp"]))
    hs = run_multi_hypothesis(prob, 1, net, _policy(cfg, "motion"), _prior_cfg(cfg), rng, None, tree)
    pred = forward_kinematics(tree, hs.solutions[0], None, hs.aux[0].get("orient"), hs.aux[0].get("transl"))
    mpjpe = em.position_error(pred, forward_kinematics(tree, gt))
    obs_err = em.position_error(prob.obs, forward_kinematics(tree, gt))
    hs.errors = np.array([mpjpe])
    _hyp_outputs(run, hs, {"observation_error": obs_err})


def cmd_eval(run: Run, cfg: dict) -> None:
    _require(cfg, "samples", "data")
    tree = _tree(cfg)
    gen = _read_poses(run.input(cfg["samples"]))
    ds = Dataset.load(run.input(cfg["data"]))
    real = ds.data
    if gen.shape[1] != real.shape[1]:
        raise ConfigError("samples and data have different pose dimensions")
    zg, zr = (gen - ds.stats.mean) / ds.stats.std, (real - ds.stats.mean) / ds.stats.std
    k = int(cfg["k"])
    prec, rec = em.precision_recall(zg, zr, k)
    values = {"fid": em.fid(zg, zr), "precision": prec, "recall": rec}
    if gen.shape[1] == tree.pose_dim:
        values["apd"] = em.apd(gen[: min(len(gen), 100)], tree) if len(gen) >= 2 else 0.0
        values["d_nn"] = em.d_nn(gen[:200], real, tree)
    report = em.MetricReport(values, {"generated": int(gen.shape[0]), "real": int(real.shape[0])})
    run.path("metrics.json").write_text(report.to_json())
    run.wrote("metrics.json")
    run.path("metrics.csv").write_text(report.to_csv_row())
    run.wrote("metrics.csv")


def ablate(net, tree: KinematicTree, data: np.ndarray, cases: int, hyp: int, iters: int, lr: float, lam_reg: float, seed: int, hide: str = "right_hand", jobs: int = 1):
    """Error statistics of the four scheduling modes on completion cases; rows keyed by mode."""
    rows = {}
    pcfg = PriorConfig(lam_reg=lam_reg, lr=lr, iters=iters, seed=seed)
    for mode, pol in ablation_policies("completion", iters).items():
        mins, means, stds, apds = [], [], [], []
        for c in range(cases):
            gt = data[c]
            prob = completion_problem(tree, gt, hide)
            hs = run_multi_hypothesis(prob, hyp, net, pol, pcfg, Rng(seed).split(c), gt, tree, jobs)
            st = hs.stats()
            mins.append(st["min"])
            means.append(st["mean"])
            stds.append(st["std"])
            apds.append(st["apd"])
        rows[mode] = {"min": float(np.mean(mins)), "mean": float(np.mean(means)), "std": float(np.mean(stds)), "apd": float(np.mean(apds))}
    return rows


def cmd_ablate_schedule(run: Run, cfg: dict) -> None:
    if cfg["task"] not in ("complete", "completion"):
        raise ConfigError("ablate-schedule supports --task complete")
    _require(cfg, "ckpt", "data")
    tree = _tree(cfg)
    net = _load_model(run.input(cfg["ckpt"]))
    data = Dataset.load(run.input(cfg["data"])).data
    rows = ablate(net, tree, data, int(cfg["cases"]), int(cfg["hyp"]), int(cfg["iters"]), cfg["lr"], cfg["lam_reg"], cfg["seed"], cfg["hide"], int(cfg["jobs"]))
    _write_rows(
        run.path("ablation.csv"), ["mode", "min", "mean", "std", "apd"],
        [[m, *(repr(v[k]) for k in ("min", "mean", "std", "apd"))] for m, v in rows.items()],
    )
    run.wrote("ablation.csv")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "complete": cmd_complete,
    "ik": cmd_ik,
    "fit2d": cmd_fit2d,
    "denoise-motion": cmd_denoise_motion,
    "eval": cmd_eval,
    "ablate-schedule": cmd_ablate_schedule,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        run = Run(ns.command, cfg)
        COMMANDS[ns.command](run, cfg)
        run.finish()
    except (FloatingPointError, NonPositiveDepth, ImprobableObservation, np.linalg.LinAlgError) as e:
        print(f"dpsrkit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, OSError, ValueError, KeyError, TypeError) as e:
        print(f"dpsrkit: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
