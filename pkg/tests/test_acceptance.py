"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (shown in the terminal summary) before asserting.
The whole module takes roughly half an hour on one core; select it with ``-m acceptance``.
"""
from __future__ import annotations

import time
from functools import lru_cache

import numpy as np
import pytest

from dpsrkit import evalmetrics as em
from dpsrkit.cli import dispatch, motion_problem
from dpsrkit.composite import CompositeNet, PartSplit, build_mixture_schedule, source_pools, train_fused, train_mixed
from dpsrkit.diffusion import CheckpointError, NoiseNet, Schedule, TrainConfig, net_from_bytes, train
from dpsrkit.diffusion.network import flat_grad
from dpsrkit.diffusion.sampling import T_EPS, sample_em
from dpsrkit.kinematics import Camera, forward_kinematics, project_perspective
from dpsrkit.numerics import Rng, Tape
from dpsrkit.numerics import autodiff as ad
from dpsrkit.prior import PriorConfig, SchedulePolicy, dposer_loss_and_grad, optimize
from dpsrkit.synthdata import conditional_oracle, hand_dataset, make_splits
from dpsrkit.tasks import CompletionProblem, MaskSpec, joint_error, run_multi_hypothesis

from conftest import directional_check, random_rotation, record_acceptance, tape_value_grad

pytestmark = pytest.mark.acceptance

MU0 = np.array([1.0, -1.0])
N_CASES, N_HYP = 10, 10
COMPLETION_ITERS, COMPLETION_LAM = 1000, 3e-3


def report(ok: bool, name: str, detail: str) -> bool:
    record_acceptance(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


# --- shared models ------------------------------------------------------

@pytest.fixture(scope="module")
def gauss_model():
    """2D net trained on N((1,-1), 0.25 I), with its wall-clock training time."""
    data = MU0 + 0.5 * Rng(1).normal((50000, 2))
    net = NoiseNet.create(2, Rng(2), hidden=128, mean=data.mean(0), std=data.std(0))
    t0 = time.perf_counter()
    train(net, net.normalize(data), TrainConfig(iters=20000, batch_size=256, lr=1e-3, lr_final=1e-5), Rng(3))
    return net, time.perf_counter() - t0


@pytest.fixture(scope="module")
def splits(spec):
    return make_splits(spec, 20000, 1)


@pytest.fixture(scope="module")
def whole_net(splits):
    tr = splits["train"]
    net = NoiseNet.create(tr.data.shape[1], Rng(2), hidden=128, mean=tr.stats.mean, std=tr.stats.std)
    train(net, tr.normalized, TrainConfig(iters=10000, lr=1e-3, lr_final=1e-5), Rng(3))
    return net


@pytest.fixture(scope="module")
def hand_mask(tree):
    lo, hi = tree.part_ranges()["right_hand"]
    return MaskSpec.hiding(tree.pose_dim, lo, hi)


def completion_errors(net, prob, gt, tree, rng, mode="truncated", lam=COMPLETION_LAM):
    policy = SchedulePolicy.for_task("completion", COMPLETION_ITERS, mode)
    cfg = PriorConfig(lam_reg=lam, iters=COMPLETION_ITERS, lr=0.05)
    return run_multi_hypothesis(prob, N_HYP, net, policy, cfg, rng, gt=gt, tree=tree).errors


# --- 1. score recovery --------------------------------------------------

def test_c1_analytic_score_recovery(gauss_model):
    net, seconds = gauss_model
    s = Schedule()
    mup = (MU0 - net.mean) / net.std
    s2 = 0.25 / net.std**2
    errs = []
    for t in np.linspace(0.05, 0.95, 10):
        a, sg = s.alpha(t), s.sigma(t)
        spread = np.sqrt(a * a * s2 + sg * sg)
        for r in (0.5, 1.0, 1.5, 2.0):
            for ang in np.linspace(0, 2 * np.pi, 8, endpoint=False):
                x = a * mup + r * spread * np.array([np.cos(ang), np.sin(ang)])
                exact = sg * (x - a * mup) / (a * a * s2 + sg * sg)
                errs.append(np.linalg.norm(net.predict(x, t) - exact) / np.linalg.norm(exact))
    err = float(np.mean(errs))
    ok = err <= 0.10 and seconds <= 300
    assert report(ok, "C1 analytic score recovery", f"mean rel err {err:.4f} (<= 0.10), train {seconds:.0f}s (<= 300s)")


# --- 2. gradient oracle -------------------------------------------------

N_CONFIGS = 100


def _noisenet_errors(rng):
    out = []
    for k in range(N_CONFIGS):
        dim = int(rng.integers(2, 8))
        net = NoiseNet.create(dim, Rng(k), hidden=int(rng.integers(8, 33)), temb_dim=8)
        net.params = 0.3 * rng.normal(size=net.n_params)
        x = rng.normal(size=(3, dim))
        t = rng.uniform(0.05, 1.0, 3)
        w = rng.normal(size=(3, dim))
        tape = Tape()
        xv = tape.var(x)
        eps, _, pvars = net.graph(tape, xv, t)
        tape.backward(ad.sum(ad.mul(eps, w)))
        grads = {"params": flat_grad(tape, pvars), "x": tape.grad(xv)}

        def f(v, net=net, t=t, w=w):
            n2 = net.copy()
            n2.params = v["params"]
            return float(np.sum(n2.predict(v["x"], t) * w))

        out.append(directional_check(f, grads, {"params": net.params, "x": x}, rng))
    return out


def _fk_errors(tree, rng):
    out = []
    for _ in range(N_CONFIGS):
        inputs = {
            "pose": 0.5 * rng.normal(size=tree.pose_dim),
            "shape": 0.2 * rng.normal(size=tree.n_bones),
            "orient": rng.normal(size=3),
            "transl": rng.normal(size=3),
        }
        w = rng.normal(size=(tree.n_joints, 3))

        def f(v, w=w):
            return ad.sum(ad.mul(forward_kinematics(tree, v["pose"], v["shape"], v["orient"], v["transl"]), w))

        _, g = tape_value_grad(f, inputs)
        out.append(directional_check(lambda v, f=f: float(f(v)), g, inputs, rng))
    return out


def _projection_errors(rng):
    out = []
    for _ in range(N_CONFIGS):
        cam = Camera(focal=rng.uniform(200, 2000), rotation=random_rotation(rng), translation=np.array([0.0, 0.0, 6.0]) + 0.3 * rng.normal(size=3))
        pts = rng.normal(size=(10, 3))
        w = rng.normal(size=(10, 2))
        f = lambda v, cam=cam, w=w: ad.sum(ad.mul(project_perspective(cam, v["p"]), w))  # noqa: E731
        _, g = tape_value_grad(f, {"p": pts})
        out.append(directional_check(lambda v, f=f: float(f(v)), g, {"p": pts}, rng))
    return out


def _gm_errors(rng):
    out = []
    for _ in range(N_CONFIGS):
        scale = 10 ** rng.uniform(-0.5, 1)
        r2 = (scale * rng.uniform(0, 3, 8)) ** 2
        w = rng.normal(size=8)
        f = lambda v, scale=scale, w=w: ad.sum(ad.mul(ad.gm_rho(v["r"], scale), w))  # noqa: E731
        _, g = tape_value_grad(f, {"r": r2})
        out.append(directional_check(lambda v, f=f: float(f(v)), g, {"r": r2}, rng))
    return out


def _task_errors(tree, rng):
    from test_tasks import _problems

    out: dict[str, list[float]] = {}
    for _ in range(N_CONFIGS):
        for prob in _problems(tree, rng):
            n = prob.rows
            pose = 0.3 * rng.normal(size=(n, tree.pose_dim))
            aux = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in prob.aux_init(n).items()}
            _, gp, ga = prob.loss_and_grad(pose, aux)
            keys = list(aux)

            def f(v, prob=prob, keys=keys):
                return float(np.sum(prob.loss_and_grad(v["pose"], {k: v[k] for k in keys})[0]))

            out.setdefault(prob.kind, []).append(directional_check(f, {"pose": gp, **ga}, {"pose": pose, **aux}, rng))
    return out


def test_c2_gradient_oracle(tree):
    rng = np.random.default_rng(2024)
    groups = {
        "noisenet": _noisenet_errors(rng),
        "fk": _fk_errors(tree, rng),
        "projection": _projection_errors(rng),
        "gm": _gm_errors(rng),
        **_task_errors(tree, rng),
    }
    worst = {k: max(v) for k, v in groups.items()}
    ok = all(len(v) >= N_CONFIGS for v in groups.values()) and all(w < 1e-5 for w in worst.values())
    detail = ", ".join(f"{k} {w:.1e}" for k, w in worst.items())
    assert report(ok, "C2 gradient oracle", f"worst rel err over {N_CONFIGS} configs each: {detail} (< 1e-5)")


# --- 3. regularizer gradient identity -----------------------------------

def test_c3_regularizer_gradient_identity(gauss_model):
    net, _ = gauss_model
    s = net.schedule
    rng = np.random.default_rng(3)
    worst_cos, worst_coef = 1.0, 0.0
    for k in range(1000):
        x0 = rng.normal(size=2)
        t = rng.uniform(T_EPS, 1.0)
        w = rng.uniform(0.1, 3.0)
        _, g, eps = dposer_loss_and_grad(net, s, x0, t, Rng(k), w)
        a, sg = s.alpha(t), s.sigma(t)
        resid = net.predict(a * x0 + sg * eps, t) - eps
        worst_cos = min(worst_cos, g @ resid / (np.linalg.norm(g) * np.linalg.norm(resid)))
        # least-squares coefficient of g on the residual, compared relative to 2 w sigma / alpha
        coef = g @ resid / (resid @ resid)
        ref = 2 * w * sg / a
        worst_coef = max(worst_coef, abs(coef - ref) / ref)
    ok = worst_cos >= 1 - 1e-9 and worst_coef <= 1e-12
    assert report(ok, "C3 regularizer gradient identity", f"min cosine 1-{1 - worst_cos:.1e}, max coefficient rel err {worst_coef:.1e} (<= 1e-12)")


# --- 4. sampler moments -------------------------------------------------

def test_c4_sampler_moments(gauss_model):
    net, _ = gauss_model
    x = sample_em(net, net.schedule, 1000, Rng(4), n=5000)
    mean_err = np.abs(x.mean(0) - MU0).max()
    cov = np.cov(x, rowvar=False)
    diag_err = np.abs(np.diag(cov) - 0.25).max() / 0.25
    off = np.abs(cov[0, 1])
    ok = mean_err <= 0.05 and diag_err <= 0.15 and off <= 0.15 * 0.25
    assert report(ok, "C4 sampler moments", f"max |mean-mu0| {mean_err:.4f} (<= 0.05), diag rel err {diag_err:.3f} (<= 0.15), |offdiag| {off:.4f} (<= 0.0375)")


# --- 5/6. completion ----------------------------------------------------

@pytest.fixture(scope="module")
def completion_cases(splits, hand_mask):
    out = []
    for i in range(N_CASES):
        gt = splits["test"].data[i]
        out.append((CompletionProblem(hand_mask, gt[hand_mask.observed]), gt))
    return out


def test_c5_completion_vs_oracle(spec, tree, whole_net, completion_cases, hand_mask):
    obs = np.flatnonzero(hand_mask.observed)
    dpsr, base, oracle = [], [], []
    for i, (prob, gt) in enumerate(completion_cases):
        post = conditional_oracle(spec, obs, gt[obs], N_HYP, Rng(100 + i))
        oracle.append(min(joint_error(tree, p, gt) for p in post.samples))
        dpsr.append(completion_errors(whole_net, prob, gt, tree, Rng(i)).min())
        base.append(completion_errors(whole_net, prob, gt, tree, Rng(i), lam=0.0).min())
    d, b, o = np.mean(dpsr), np.mean(base), np.mean(oracle)
    ok = d <= 1.5 * o and d <= 0.7 * b
    assert report(ok, "C5 completion vs oracle", f"min err {d:.5f}, oracle {o:.5f} (ratio {d / o:.2f} <= 1.5), no-prior {b:.5f} (reduction {1 - d / b:.0%} >= 30%)")


def test_c6_schedule_ablation(tree, whole_net, completion_cases):
    means = {m: [] for m in ("truncated", "uniform", "random")}
    for seed in range(3):
        for i, (prob, gt) in enumerate(completion_cases):
            for m in means:
                means[m].append(completion_errors(whole_net, prob, gt, tree, Rng(1000 * seed + i), mode=m).mean())
    tr, un, ra = (float(np.mean(means[m])) for m in ("truncated", "uniform", "random"))
    ok = tr <= un and tr <= ra
    assert report(ok, "C6 schedule ablation", f"mean err truncated {tr:.5f}, uniform {un:.5f}, random {ra:.5f} (truncated lowest)")


# --- 7. mixed training --------------------------------------------------

def test_c7_mixed_training_correlation(spec, tree, splits, completion_cases):
    x = splits["train"].data
    sp = spec.split

    def part(xp, seed):
        net = NoiseNet.create(xp.shape[1], Rng(seed), hidden=128, mean=xp.mean(0), std=np.maximum(xp.std(0), 1e-6))
        train(net, net.normalize(xp), TrainConfig(iters=5000, lr=1e-3, lr_final=1e-5), Rng(seed + 100))
        return net

    body = part(x[:, slice(*sp["body"])], 1)
    hand = part(hand_dataset(spec, x), 2)
    face = part(x[:, slice(*sp["face"])], 3)
    split = PartSplit(tree.part_ranges())
    cfg = TrainConfig(iters=5000, lr=1e-3, lr_final=1e-5)
    err = {}
    for variant in ("base", "fused", "mixed"):
        cn = CompositeNet.assemble(split, body, hand, face, tree.hand_mirror_signs(), variant, Rng(5), hidden=256)
        if variant == "fused":
            train_fused(cn, cn.normalize(x), cfg, Rng(6))
        elif variant == "mixed":
            train_mixed(cn, build_mixture_schedule(split, source_pools(cn, x, Rng(7))), cfg, Rng(6))
        err[variant] = float(np.mean([completion_errors(cn, prob, gt, tree, Rng(i)).mean() for i, (prob, gt) in enumerate(completion_cases)]))
    ok = err["mixed"] <= 0.7 * err["base"] and err["mixed"] <= 1.2 * err["fused"]
    detail = f"mean err base {err['base']:.5f}, fused {err['fused']:.5f}, mixed {err['mixed']:.5f}"
    assert report(ok, "C7 mixed training", f"{detail}; mixed/base {err['mixed'] / err['base']:.2f} (<= 0.7), mixed/fused {err['mixed'] / err['fused']:.2f} (<= 1.2)")


# --- 8/9. motion denoising ----------------------------------------------

@pytest.fixture(scope="module")
def motion_runner(tree, spec, whole_net):
    n_seq, frames, iters = 4, 60, 500

    @lru_cache(maxsize=None)
    def cases(noise):
        out = []
        for k in range(n_seq):
            prob, gt = motion_problem(tree, spec, frames, 0.1, noise, Rng(50 + k))
            out.append((prob, forward_kinematics(tree, gt)))
        return out

    @lru_cache(maxsize=None)
    def run(noise, lam, t_max=0.2, t_min=0.05):
        errs = []
        for prob, gt_joints in cases(noise):
            res = optimize(prob, whole_net, SchedulePolicy("truncated", t_max, t_min, iters), PriorConfig(lam_reg=lam, iters=iters), np.zeros((frames, tree.pose_dim)), Rng(0))
            joints = forward_kinematics(tree, res.pose, None, res.aux["orient"], res.aux["transl"])
            errs.append(em.position_error(joints, gt_joints))
        return float(np.mean(errs))

    return run


def test_c8_motion_denoising(motion_runner):
    plain, prior = motion_runner(0.04, 0.0), motion_runner(0.04, 0.1)
    ok = prior <= 0.9 * plain
    assert report(ok, "C8 motion denoising", f"MPJPE no-prior {plain:.5f}, prior {prior:.5f} (reduction {1 - prior / plain:.1%} >= 10%)")


def test_c9_timestep_range(motion_runner):
    intervals = [(0.15, 0.05), (0.2, 0.05), (0.2, 0.1), (0.25, 0.1)]
    best = {}
    for noise in (0.04, 0.1):
        errs = [motion_runner(noise, 0.1, hi, lo) for hi, lo in intervals]
        best[noise] = intervals[int(np.argmin(errs))]
    ok = best[0.1][0] >= best[0.04][0]
    assert report(ok, "C9 timestep range", f"best interval at 0.04 {best[0.04]}, at 0.1 {best[0.1]} (t_max non-decreasing)")


# --- 10. determinism ----------------------------------------------------

def test_c10_determinism_and_formats(tmp_path):
    def pipeline(root):
        codes = [
            dispatch(["gen-data", "--n", "400", "--seed", "11", "--out", str(root / "data")]),
            dispatch(["train", "--data", str(root / "data" / "train.dpsd"), "--iters", "50", "--batch", "32", "--hidden", "32", "--seed", "12", "--out", str(root / "model")]),
            dispatch(["complete", "--ckpt", str(root / "model" / "model.dpsr"), "--data", str(root / "data" / "test.dpsd"), "--hyp", "3", "--iters", "20", "--seed", "13", "--jobs", "1", "--out", str(root / "complete")]),
        ]
        return codes

    files = ["data/train.dpsd", "data/val.dpsd", "data/test.dpsd", "model/model.dpsr", "model/losses.csv", "complete/hypotheses.csv"]
    codes = pipeline(tmp_path / "a") + pipeline(tmp_path / "b")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    blob = bytearray((tmp_path / "a" / "model" / "model.dpsr").read_bytes())
    blob[len(blob) // 2] ^= 0x01
    try:
        net_from_bytes(bytes(blob))
        rejected = False
    except CheckpointError:
        rejected = True
    (tmp_path / "bad.dpsr").write_bytes(bytes(blob))
    cli_code = dispatch(["sample", "--ckpt", str(tmp_path / "bad.dpsr"), "--n", "2", "--steps", "2", "--out", str(tmp_path / "s")])
    ok = codes == [0] * 6 and same and rejected and cli_code == 2
    assert report(ok, "C10 determinism and formats", f"exit codes {codes}, bit-identical {same}, corrupted CRC rejected {rejected} (cli exit {cli_code})")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
