"""Fast self-check suite behind ``quantrelax verify``.

Each check is a small, seeded property test returning ``(ok, detail)``.
Sizes are reduced relative to the full acceptance suite so the whole
set runs in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import diagnostics as dg
from .objectives import MlpLayout, gen_blobs, make_logistic, make_mlp, make_quadratic, Dataset
from .optimizers import LearningRateSchedule, binaryconnect_step, binaryrelax_step, init_state
from .quantizer import (binarize, binary_scheme, brute_force_quantize, project,
                        ternarize_exact, ternarize_threshold, ternary_scheme)
from .relaxation import RelaxationSchedule, advance_lambda, relaxed_prox, relaxed_prox_objective


@dataclass(frozen=True)
class Check:
    name: str
    module: str
    fn: Callable[[frozenset], tuple[bool, str]]


CHECKS: list[Check] = []


def check(name: str, module: str):
    def deco(fn):
        CHECKS.append(Check(name, module, fn))
        return fn
    return deco


def _objective(y, codes_point):
    return float(np.sum((codes_point.materialized - y) ** 2))


@check("quantizer-oracle", "quantizer")
def _quantizer_oracle(faults):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        y = rng.standard_normal(8)
        for fast, levels in ((binarize, (1.0,)), (ternarize_exact, (0.0, 1.0))):
            a = _objective(y, fast(y))
            b = _objective(y, brute_force_quantize(y, levels))
            worst = max(worst, abs(a - b) / max(b, 1e-300))
    return worst <= 1e-10, f"max relative objective gap {worst:.3g}"


@check("twn-gap", "quantizer")
def _twn_gap(faults):
    rng = np.random.default_rng(2)
    strict = 0
    for _ in range(200):
        y = rng.standard_normal(8)
        a = ternarize_threshold(y).residual(y)
        b = ternarize_exact(y).residual(y)
        if a < b - 1e-12:
            return False, "threshold ternarization beat the exact projection"
        strict += a > b + 1e-12
    return strict > 0, f"{strict} strict witnesses"


@check("projection-idempotence", "quantizer")
def _idempotence(faults):
    rng = np.random.default_rng(3)
    for scheme in (binary_scheme(), ternary_scheme()):
        for _ in range(100):
            p = project(rng.standard_normal(16), scheme).materialized
            if not np.array_equal(project(p, scheme).materialized, p):
                return False, f"{scheme.solver.value} not idempotent"
    return True, "ok"


def _prox(y, lam, scheme, faults):
    x = relaxed_prox(y, lam, scheme)
    if "prox" in faults:
        x = x + 1e-3 * (y - project(y, scheme).materialized)
    return x


@check("prox-optimality", "relaxation")
def _prox_optimality(faults):
    rng = np.random.default_rng(4)
    scheme = ternary_scheme()
    for _ in range(50):
        y = rng.standard_normal(6)
        lam = float(rng.choice([0.1, 1.0, 10.0, 100.0]))
        x = _prox(y, lam, scheme, faults)
        fx = relaxed_prox_objective(x, y, lam, scheme)
        p = project(y, scheme).materialized
        for t in np.linspace(0.0, 1.0, 201):
            if relaxed_prox_objective(y + t * (p - y), y, lam, scheme) < fx - 1e-9:
                return False, f"segment point t={t:.3f} beats the prox at lambda={lam}"
    return True, "ok"


@check("prox-limits", "relaxation")
def _prox_limits(faults):
    rng = np.random.default_rng(5)
    scheme = binary_scheme()
    y = rng.standard_normal(10)
    p = project(y, scheme).materialized
    small = np.max(np.abs(_prox(y, 1e-12, scheme, faults) - y))
    big = np.linalg.norm(_prox(y, 1e9, scheme, faults) - p) / np.linalg.norm(p)
    return small <= 1e-9 and big <= 1e-6, f"|x-y|={small:.2g}, rel|x-p|={big:.2g}"


@check("lambda-continuation", "relaxation")
def _lambda(faults):
    sched = RelaxationSchedule(1.0, 1.02, 1.0, 240)
    state = sched.initial_state()
    for _ in range(240):
        state = advance_lambda(sched, state, 1.0)
    return 100 < state.lam < 200 and abs(state.lam - 1.02**240) < 1e-9, f"lambda={state.lam:.6g}"


@check("prop-global", "relaxation")
def _prop_global(faults):
    c = np.array([1.0, 0.2])
    scheme = ternary_scheme()
    dists, vals = [], []
    for lam in (1.0, 10.0, 1e2, 1e3, 1e4):
        # f(x) = ||x - c||^2 corresponds to diag = 2.
        x = dg.relaxed_minimizer_quadratic(c, lam, scheme, diag=[2.0, 2.0])
        dists.append(dg.dist_to_q(x, scheme))
        vals.append(float(np.sum((x - c) ** 2)))
    ok = all(b < a for a, b in zip(dists, dists[1:])) and abs(vals[-1] - 0.04) <= 0.04e-3
    return ok, f"dist={dists[-1]:.3g}, f={vals[-1]:.6g}"


@check("descent", "diagnostics")
def _descent(faults):
    rng = np.random.default_rng(6)
    oracle = make_quadratic([1.0, 0.2, -0.5])
    scheme = ternary_scheme()
    for _ in range(10):
        x = project(rng.standard_normal(3), scheme).materialized
        if np.linalg.norm(oracle.grad(x)) <= 1e-8:
            continue
        found, _ = dg.descent_check(x, oracle, 10.0, scheme)
        if not found:
            return False, f"no descent from {x}"
    return True, "ok"


@check("theta-min", "diagnostics")
def _theta(faults):
    a = dg.theta_min(ternary_scheme(), 2)
    b = dg.theta_min(binary_scheme(), 3)
    ok = abs(a - math.pi / 4) <= 1e-12 and abs(b - math.acos(1 / 3)) <= 1e-12
    return ok, f"ternary n=2: {a:.15f}, binary n=3: {b:.15f}"


@check("alpha", "diagnostics")
def _alpha(faults):
    scheme = ternary_scheme()
    oracle = make_quadratic([1.0, 0.35], [1.0, 3.0])
    theta = dg.theta_min(scheme, 2)
    rng = np.random.default_rng(7)
    state = init_state(rng.standard_normal(2), "binaryconnect", scheme)
    for k in range(500):
        batch = rng.integers(0, 2, size=1)
        new = binaryconnect_step(state, oracle, batch, 0.02, scheme)
        rec = dg.alpha_k(state.y, state.x, new.x, scheme, k)
        if rec.alpha is not None:
            if rec.alpha < -1e-10:
                return False, f"negative alpha {rec.alpha} at k={k}"
            if rec.step_norm < np.linalg.norm(state.x) * math.sin(theta):
                if not rec.same_line or abs(rec.alpha - 1) > 1e-8:
                    return False, f"alpha={rec.alpha} on a short step at k={k}"
        state = new
    return True, "ok"


@check("theorem-trend", "optimizers")
def _theorem(faults):
    scheme = ternary_scheme()
    # Curvature 9 keeps gamma_0 * L = 0.45 below 1/2; the limit line is stable here.
    oracle = make_quadratic([1.0, 0.05, -0.03], [9.0, 9.0, 9.0])
    state = init_state([0.96, 0.12, -0.1], "binaryconnect", scheme)
    lr = LearningRateSchedule(0.05, (), 0.1, "inverse")
    iters = 4000
    steps, best = [], math.inf
    everything = np.arange(oracle.num_samples)
    for k in range(iters):
        gamma = lr.at(0, k)
        new = binaryconnect_step(state, oracle, everything, gamma, scheme)
        d = float(np.sum((new.x - state.x) ** 2))
        steps.append(d)
        best = min(best, d / gamma**2)
        state = new
    tail = float(np.mean(steps[-iters // 10:]))
    return tail < 1e-6 and best < 1e-4, f"tail mean {tail:.3g}, min proxy {best:.3g}"


@check("reductions", "optimizers")
def _reductions(faults):
    scheme = ternary_scheme()
    oracle = make_quadratic([0.7, -0.2, 0.4, 1.1])
    rng = np.random.default_rng(8)
    y0 = rng.standard_normal(4)
    sched = RelaxationSchedule(1.0, 1.02, 1.0, 0)
    a = init_state(y0, "binaryconnect", scheme)
    b = init_state(y0, "binaryrelax", scheme, sched)
    for _ in range(200):
        batch = rng.integers(0, 4, size=2)
        a = binaryconnect_step(a, oracle, batch, 0.05, scheme)
        b = binaryrelax_step(b, oracle, batch, 0.05, scheme, sched)
        if not (np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)):
            return False, "phase-II BinaryRelax diverged from BinaryConnect"
    tiny = RelaxationSchedule(1e-12, 1.0, 1.0, 10**6)
    r = init_state(y0, "binaryrelax", scheme, tiny)
    y = y0.copy()
    for _ in range(200):
        batch = rng.integers(0, 4, size=2)
        y = y - 0.05 * oracle.stochastic_grad(y, batch)
        r = binaryrelax_step(r, oracle, batch, 0.05, scheme, tiny, epochs_delta=0.01)
        if np.max(np.abs(r.y - y)) > 1e-9:
            return False, "vanishing relaxation did not track plain SGD"
    return True, "ok"


@check("gradients", "objectives")
def _gradients(faults):
    train, _ = gen_blobs(60, 3, 3, 0.8, 0)
    mlp = make_mlp(MlpLayout(3, 5, 3, "tanh"), train)
    two = Dataset(train.features, (train.labels > 0).astype(int), 2)
    logit = make_logistic(two)
    rng = np.random.default_rng(9)
    worst = {}
    for name, oracle in (("mlp", mlp), ("logistic", logit)):
        x = rng.standard_normal(oracle.n) * 0.5
        g = oracle.grad(x)
        fd = finite_difference(oracle.full_loss, x, 1e-6)
        worst[name] = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    ok = worst["mlp"] < 1e-4 and worst["logistic"] < 1e-5
    return ok, ", ".join(f"{k} rel err {v:.2g}" for k, v in worst.items())


def finite_difference(f, x, h: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def select(filter_name: str | None) -> list[Check]:
    if not filter_name:
        return list(CHECKS)
    return [c for c in CHECKS if filter_name in (c.name, c.module) or c.name.startswith(filter_name)]


def run_checks(filter_name: str | None = None, faults: Iterable[str] = ()):
    """Yield ``(check, ok, detail)``; exceptions count as failures."""
    faults = frozenset(faults)
    for c in select(filter_name):
        try:
            ok, detail = c.fn(faults)
        except Exception as exc:  # noqa: BLE001 - reported as a failed property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield c, bool(ok), detail


__all__ = ["CHECKS", "Check", "finite_difference", "run_checks", "select"]
