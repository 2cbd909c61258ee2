from __future__ import annotations

import numpy as np
import pytest

from dpsrkit.diffusion import NoiseNet, TrainConfig, train
from dpsrkit.kinematics import default_tree
from dpsrkit.numerics import Rng, Tape
from dpsrkit.synthdata import default_spec, make_splits

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tree():
    return default_tree()


@pytest.fixture(scope="session")
def spec(tree):
    return default_spec(tree)


@pytest.fixture(scope="session")
def small_splits(spec):
    return make_splits(spec, 4000, 1)


@pytest.fixture(scope="session")
def small_prior(small_splits):
    """Whole-figure net trained briefly; enough structure for unit-level behaviour checks."""
    tr = small_splits["train"]
    net = NoiseNet.create(tr.data.shape[1], Rng(2), hidden=64, mean=tr.stats.mean, std=tr.stats.std)
    train(net, tr.normalized, TrainConfig(iters=2000, lr=1e-3, lr_final=1e-5), Rng(3))
    return net


def tape_value_grad(fn, inputs: dict):
    """Scalar value of fn(vars) and the tape gradient for each named input."""
    tape = Tape()
    vs = {k: tape.var(np.asarray(v, dtype=np.float64)) for k, v in inputs.items()}
    out = fn(vs)
    tape.backward(out)
    return float(out.value), {k: tape.grad(v) for k, v in vs.items()}


def directional_check(f_np, grads: dict, inputs: dict, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error between <grad, d> and the central difference of f along a random d."""
    dirs = {k: rng.normal(size=np.shape(v)) for k, v in inputs.items()}
    plus = {k: inputs[k] + h * dirs[k] for k in inputs}
    minus = {k: inputs[k] - h * dirs[k] for k in inputs}
    fd = (f_np(plus) - f_np(minus)) / (2.0 * h)
    an = sum(float(np.sum(grads[k] * dirs[k])) for k in inputs)
    return abs(fd - an) / max(abs(fd), abs(an), 1e-300)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
