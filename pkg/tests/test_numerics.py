from __future__ import annotations

import numpy as np
import pytest

from dpsrkit.numerics import (
    AdamState,
    Rng,
    Tape,
    adam_step,
    directional_fd,
    finite_diff_grad,
    gaussian_sample,
    jacobi_eigh,
    rel_err,
    sym_psd_sqrt,
)
from dpsrkit.numerics import autodiff as ad

from conftest import tape_value_grad


# --- random streams ---------------------------------------------------------

def test_gaussian_sample_deterministic():
    a = gaussian_sample(Rng(7), 3)
    b = gaussian_sample(Rng(7), 3)
    assert a.shape == (3,)
    assert np.array_equal(a, b)


def test_gaussian_sample_moments_large_n():
    z = gaussian_sample(Rng(11), 10**6)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.02


def test_gaussian_sample_rejects_zero():
    with pytest.raises(ValueError):
        gaussian_sample(Rng(0), 0)


def test_split_streams_are_distinct_and_reproducible():
    r = Rng(3)
    a, b = r.split(0).normal(5), r.split(1).normal(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, Rng(3).split(0).normal(5))


def test_uniform_range_and_choice_probabilities():
    r = Rng(5)
    u = r.uniform(10000, 2.0, 3.0)
    assert np.all(u > 2.0) and np.all(u <= 3.0)
    c = r.choice(3, 100000, p=[0.2, 0.0, 0.8])
    freq = np.bincount(c, minlength=3) / c.size
    assert freq[1] == 0.0
    assert abs(freq[0] - 0.2) < 0.01


def test_rng_rejects_negative_seed():
    with pytest.raises(ValueError):
        Rng(-1)


# --- Adam -------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    st = AdamState(3, lr=0.1)
    assert np.array_equal(adam_step(p, np.zeros(3), st), p)
    assert st.step == 1


def test_adam_first_step_magnitude_is_lr():
    st = AdamState(1, lr=0.1, beta1=0.9, beta2=0.999)
    out = adam_step(np.array([0.0]), np.array([1.0]), st)
    # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
    assert out[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_identical_trajectories_and_counter():
    g = np.random.default_rng(0).normal(size=(20, 4))
    s1, s2 = AdamState(4, lr=0.01), AdamState(4, lr=0.01)
    p1 = p2 = np.ones(4)
    for k, gk in enumerate(g, start=1):
        p1, p2 = adam_step(p1, gk, s1), adam_step(p2, gk, s2)
        assert s1.step == k
    assert np.array_equal(p1, p2)
    assert s1.m.shape == s1.v.shape == (4,)


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), AdamState(3))
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(3), AdamState(4))


# --- finite differences -----------------------------------------------------

def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: float(np.sum(x * x)), np.array([1.0, 2.0]), h=1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant_is_zero():
    assert np.array_equal(finite_diff_grad(lambda x: 3.0, np.arange(4.0)), np.zeros(4))


def test_finite_diff_nonfinite_raises():
    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError):
            finite_diff_grad(lambda x: float(np.log(x[0])), np.array([0.0]))
        with pytest.raises(FloatingPointError):
            directional_fd(lambda x: float(np.log(x[0])), np.array([0.0]), np.array([1.0]))


def test_rel_err_basic():
    assert rel_err([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert rel_err([1.0], [2.0]) == pytest.approx(0.5)


# --- tape -------------------------------------------------------------------

def test_tape_matches_fd_on_primitive_mix():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    c = rng.uniform(0.5, 1.5, size=(3, 2))

    def f(v):
        h = ad.silu(ad.matmul(v["a"], v["b"]))
        h = ad.div(ad.exp(ad.mul(h, 0.3)), v["c"])
        h = ad.concat([h, ad.square(ad.getitem(v["a"], (slice(None), slice(0, 2))))], axis=-1)
        return ad.sum(ad.reshape(ad.sub(h, 0.1), (-1,)))

    inputs = {"a": a, "b": b, "c": c}
    _, g = tape_value_grad(f, inputs)
    for k in inputs:
        def fk(x, k=k):
            return f({**inputs, k: x})
        assert rel_err(g[k], finite_diff_grad(fk, inputs[k])) < 1e-8


def test_tape_operator_overloads_and_broadcast():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    bias = np.array([0.5, -0.5])

    def f(v):
        y = (v["x"] + v["b"]) * 2.0 - v["x"] / 4.0
        return ad.sum(y @ np.ones((2, 1)))

    _, g = tape_value_grad(f, {"x": x, "b": bias})
    assert np.allclose(g["x"], np.full((2, 2), 1.75))
    assert np.allclose(g["b"], [4.0, 4.0])


def test_tape_clear_and_unused_input():
    tape = Tape()
    a, b = tape.var(np.ones(2)), tape.var(np.ones(2))
    tape.backward(ad.sum(ad.mul(a, 3.0)))
    assert np.array_equal(tape.grad(a), [3.0, 3.0])
    assert np.array_equal(tape.grad(b), [0.0, 0.0])
    tape.clear()
    assert len(tape) == 0


def test_gm_rho_limits_and_gradient():
    s = 100.0
    assert float(ad.gm_rho(np.array(0.0), s)) == 0.0
    assert float(ad.gm_rho(np.array(1e14), s)) == pytest.approx(s * s, rel=1e-6)
    r2 = np.array([0.5, 40.0, 9000.0, 1e5])
    _, g = tape_value_grad(lambda v: ad.sum(ad.gm_rho(v["r"], s)), {"r": r2})
    fd = finite_diff_grad(lambda x: float(np.sum(ad.gm_rho(x, s))), r2, h=1e-3)
    assert rel_err(g["r"], fd) < 1e-7


# --- linear algebra ---------------------------------------------------------

def test_sym_psd_sqrt_examples():
    assert np.allclose(sym_psd_sqrt(np.eye(3)), np.eye(3), atol=1e-14)
    assert np.allclose(sym_psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_sym_psd_sqrt_reconstructs_random_psd():
    rng = np.random.default_rng(2)
    for n in (3, 6, 12):
        a = rng.normal(size=(n, n))
        m = a.T @ a
        s = sym_psd_sqrt(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-8
        assert np.allclose(s, s.T, atol=1e-12)


def test_sym_psd_sqrt_rank_deficient_and_errors():
    v = np.array([[1.0, 2.0, 2.0]])
    m = v.T @ v
    s = sym_psd_sqrt(m)
    assert np.linalg.norm(s @ s - m) < 1e-10
    with pytest.raises(ValueError):
        sym_psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        sym_psd_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        sym_psd_sqrt(np.ones((2, 3)))


def test_jacobi_eigh_matches_numpy():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(8, 8))
    m = a + a.T
    w, v = jacobi_eigh(m)
    assert np.allclose(np.sort(w), np.linalg.eigvalsh(m), atol=1e-10)
    assert np.allclose(v @ np.diag(w) @ v.T, m, atol=1e-10)
    assert np.allclose(v.T @ v, np.eye(8), atol=1e-12)
