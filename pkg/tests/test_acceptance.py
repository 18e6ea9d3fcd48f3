"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible without ``-s``)
and then asserts both the property and its time budget.
"""

import math
import time
from contextlib import contextmanager
from importlib import resources

import numpy as np
import pytest

from oracles import central_difference, constrained_quadratic_min, \
    smallest_angle, unit_lines
from quantrelax import diagnostics as dg
from quantrelax.config import apply_overrides, load_config, run_quiet
from quantrelax.objectives import Dataset, MlpLayout, gen_blobs, make_logistic, make_mlp, \
    make_quadratic
from quantrelax.optimizers import LearningRateSchedule, TrainConfig, run_training
from quantrelax.quantizer import (binarize, binary_scheme, brute_force_quantize, dist_to_q,
                                  project, ternarize_exact, ternarize_threshold, ternary_scheme)
from quantrelax.relaxation import RelaxationSchedule, advance_lambda, relaxed_prox, \
    relaxed_prox_objective

TERNARY = ternary_scheme()


@pytest.fixture
def report(capsys):
    """Time the body, print one verdict line, then fail on a false verdict."""

    @contextmanager
    def run(label, budget):
        box = {"ok": True, "detail": ""}
        start = time.perf_counter()
        try:
            yield box
        except AssertionError as exc:
            box["ok"], box["detail"] = False, str(exc).splitlines()[0]
        elapsed = time.perf_counter() - start
        timed_ok = elapsed < budget
        ok = box["ok"] and timed_ok
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {box['detail']} "
                  f"[{elapsed:.2f}s / {budget:g}s]")
        assert box["ok"], box["detail"]
        assert timed_ok, f"{label} took {elapsed:.2f}s, budget {budget}s"

    return run


def test_c01_quantizer_oracle_equivalence(report):
    with report("C1 quantizer oracle equivalence", 10) as r:
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(1000):
            y = rng.standard_normal(8)
            for fast, levels in ((binarize, (1.0,)), (ternarize_exact, (0.0, 1.0))):
                a = fast(y).residual(y) ** 2
                b = brute_force_quantize(y, levels).residual(y) ** 2
                worst = max(worst, abs(a - b) / b)
        r["detail"] = f"max relative gap {worst:.2e} over 1000 vectors"
        assert worst <= 1e-10, r["detail"]


def test_c02_threshold_ternarization_gap(report):
    with report("C2 threshold vs exact ternarization", 5) as r:
        rng = np.random.default_rng(102)
        strict, witness = 0, None
        for _ in range(1000):
            y = rng.standard_normal(8)
            a = ternarize_threshold(y).residual(y)
            b = ternarize_exact(y).residual(y)
            assert a >= b - 1e-12 * max(b, 1.0), f"threshold beat exact on {y.tolist()}"
            if a > b + 1e-12:
                strict += 1
                witness = witness if witness is not None else (a, b)
        r["detail"] = f"{strict} strict witnesses, first {witness}"
        assert strict > 0, "no strict witness"


def rowwise_dist_sq(z, ternary):
    """Squared distance of each row to Q via sorted prefix sums (no package code)."""
    mags = -np.sort(-np.abs(z), axis=1)
    sq = np.sum(z * z, axis=1)
    if not ternary:
        return sq - mags.sum(axis=1) ** 2 / z.shape[1]
    prefix = np.cumsum(mags, axis=1)
    return sq - np.max(prefix ** 2 / np.arange(1, z.shape[1] + 1), axis=1)


def test_c03_relaxed_prox_correctness(report):
    with report("C3 relaxed prox optimality and limits", 10) as r:
        rng = np.random.default_rng(103)
        ts = np.linspace(0.0, 1.0, 1000)[:, None]
        worst = -math.inf
        for i in range(200):
            ternary = bool(i % 2)
            scheme = TERNARY if ternary else binary_scheme()
            y = rng.standard_normal(6)
            lam = float(rng.choice([0.1, 1.0, 10.0, 100.0]))
            x = relaxed_prox(y, lam, scheme)
            p = project(y, scheme).materialized
            fx = relaxed_prox_objective(x, y, lam, scheme)
            z = np.vstack([y, p, y + ts * (p - y)])
            values = 0.5 * np.sum((z - y) ** 2, axis=1) + 0.5 * lam * rowwise_dist_sq(z, ternary)
            worst = max(worst, fx - float(values.min()))
        assert worst <= 1e-9, f"prox exceeded a candidate by {worst:.3g}"
        y = rng.standard_normal(10)
        p = project(y, TERNARY).materialized
        small = float(np.max(np.abs(relaxed_prox(y, 1e-12, TERNARY) - y)))
        big = float(np.linalg.norm(relaxed_prox(y, 1e9, TERNARY) - p) / np.linalg.norm(p))
        assert small <= 1e-9 and big <= 1e-6, f"limits {small:.2g}, {big:.2g}"
        r["detail"] = f"worst excess {worst:.2e}, |x-y|={small:.1e}, rel|x-p|={big:.1e}"


def test_c04_relaxed_minimizers_approach_constraint_set(report):
    with report("C4 relaxed minimizers converge to Q", 5) as r:
        c, diag = np.array([1.0, 0.2]), [2.0, 2.0]  # f = ||x - c||^2
        _, f_star = constrained_quadratic_min(c, diag, (-1, 0, 1))
        assert abs(f_star - 0.04) <= 1e-15, f"enumerated optimum {f_star}"
        dists, vals = [], []
        for lam in (1.0, 10.0, 1e2, 1e3, 1e4):
            x = dg.relaxed_minimizer_quadratic(c, lam, TERNARY, diag=diag)
            dists.append(dist_to_q(x, TERNARY))
            vals.append(float(np.sum((x - c) ** 2)))
        assert all(b < a for a, b in zip(dists, dists[1:])), f"distances {dists}"
        assert abs(vals[-1] - f_star) <= abs(f_star) * 1e-3, f"f={vals[-1]}"
        r["detail"] = f"dist {dists[0]:.3g} -> {dists[-1]:.3g}, f={vals[-1]:.6f}"


def test_c05_quantized_points_admit_descent(report):
    with report("C5 descent from quantized points", 5) as r:
        rng = np.random.default_rng(105)
        oracle = make_quadratic([1.0, 0.2, -0.5, 0.8], [1.0, 2.0, 0.5, 3.0])
        found = 0
        while found < 20:
            x = project(rng.standard_normal(4), TERNARY).materialized
            if np.linalg.norm(oracle.grad(x)) <= 1e-8:
                continue
            lam = float(rng.choice([1.0, 10.0, 100.0]))
            ok, beta = dg.descent_check(x, oracle, lam, TERNARY)
            assert ok, f"no descent from {x.tolist()} at lambda={lam}"
            found += 1
        r["detail"] = "20/20 points have a descending step"


def test_c06_alpha_properties_on_exact_phase_trace(report):
    with report("C6 approximate orthogonality on a phase-II trace", 30) as r:
        oracle = make_quadratic([1.0, 0.35, -0.6], [1.0, 3.0, 2.0])
        theta = dg.theta_min(TERNARY, 3)
        cfg = TrainConfig("binaryrelax", epochs=1700, batch_size=1,
                          lr=LearningRateSchedule(0.02, ()),
                          relax=RelaxationSchedule(1.0, 1.2, 1.0, 20), scheme=TERNARY, seed=106)
        trace = []
        run_training(cfg, oracle, init=[0.4, -0.9, 0.2],
                     on_step=lambda i: trace.append(i) if i.phase.value == "exact" else None)
        assert len(trace) >= 5000, f"only {len(trace)} phase-II steps"
        defined = short = 0
        lowest = math.inf
        for info in trace[:5000]:
            rec = dg.alpha_k(info.y_prev, info.x_prev, info.x, TERNARY)
            if rec.alpha is None:
                continue
            defined += 1
            lowest = min(lowest, rec.alpha)
            assert rec.alpha >= -1e-10, f"alpha {rec.alpha} at k={info.k}"
            if rec.step_norm < np.linalg.norm(info.x_prev) * math.sin(theta):
                short += 1
                assert abs(rec.alpha - 1) <= 1e-8, f"short step alpha {rec.alpha}"
        a = dg.theta_min(TERNARY, 2)
        b = dg.theta_min(binary_scheme(), 3)
        assert abs(a - math.pi / 4) <= 1e-12 and abs(b - math.acos(1 / 3)) <= 1e-12
        # Independent cross-check by pairwise angles between enumerated lines.
        assert abs(a - smallest_angle(unit_lines((-1, 0, 1), 2))) <= 1e-12
        assert abs(b - smallest_angle(unit_lines((-1, 1), 3))) <= 1e-12
        assert short > 0 and defined > 0
        r["detail"] = f"{defined} defined, {short} short steps, min alpha {lowest:.4f}"


def test_c07_successive_differences_vanish(report):
    with report("C7 successive-difference decay", 20) as r:
        # Curvature 9 keeps gamma_0 * L below 1/2, so the limit line is stable.
        oracle = make_quadratic([1.0, 0.05, -0.03], [9.0, 9.0, 9.0])
        iters = 10_000
        cfg = TrainConfig("binaryconnect", epochs=iters, batch_size=oracle.num_samples,
                          lr=LearningRateSchedule(0.05, (), 0.1, "inverse"), scheme=TERNARY)
        steps, best = [], math.inf

        def record(info):
            nonlocal best
            d = float(np.sum((info.x - info.x_prev) ** 2))
            steps.append(d)
            best = min(best, dg.stationarity_proxy(info.x_prev, info.x, info.gamma))

        result = run_training(cfg, oracle, init=[0.96, 0.12, -0.1], on_step=record)
        assert result.sigma2 == 0.0
        assert len(steps) == iters
        tail = float(np.mean(steps[-iters // 10:]))
        r["detail"] = f"tail mean {tail:.2e}, min proxy {best:.2e}"
        assert tail < 1e-6 and best < 1e-4, r["detail"]


def test_c08_reduction_identities(report):
    with report("C8 reduction identities", 10) as r:
        oracle = make_quadratic([0.7, -0.2, 0.4, 1.1], [1.0, 2.0, 0.5, 1.5])
        init = [0.3, -0.8, 1.2, 0.1]
        base = dict(epochs=250, batch_size=1, lr=LearningRateSchedule(0.05, (100,), 0.5),
                    scheme=TERNARY, momentum=0.9, weight_decay=1e-4, seed=108)

        def trace(**kw):
            out = []
            run_training(TrainConfig(**{**base, **kw}), oracle, init=init,
                         on_step=lambda i: out.append((i.y, i.x)))
            return out

        bc = trace(optimizer="binaryconnect")
        br = trace(optimizer="binaryrelax", relax=RelaxationSchedule(1.0, 1.02, 1.0, 0))
        assert len(bc) == len(br) == 1000
        same = all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                   for a, b in zip(bc, br))
        assert same, "T=0 run differs from BinaryConnect"

        sgd = trace(optimizer="float")
        tiny = trace(optimizer="binaryrelax", relax=RelaxationSchedule(1e-12, 1.0, 1.0, 10**6))
        gap = max(float(np.max(np.abs(a[0] - b[0]))) for a, b in zip(sgd, tiny))
        r["detail"] = f"bitwise equal over 1000 steps, SGD gap {gap:.2e}"
        assert gap <= 1e-9, r["detail"]


def test_c09_desk_scale_training(report):
    with report("C9 desk-scale training analogue", 300) as r:
        base = load_config(resources.files("quantrelax") / "configs" / "desk_blobs.json")
        seeds = range(10)
        acc = {}
        dists = []
        for opt in ("float", "binaryconnect", "binaryrelax"):
            acc[opt] = []
            for s in seeds:
                res = run_quiet(apply_overrides(base, [f"optimizer={opt}", f"seed={s}"]))
                acc[opt].append(res.final.val_acc)
                if opt == "binaryrelax":
                    assert res.final.phase == "exact"
                    dists.append(res.final.dist_to_q)
        mean = {k: float(np.mean(v)) for k, v in acc.items()}
        r["detail"] = ", ".join(f"{k} {100 * v:.2f}%" for k, v in mean.items())
        assert 0.95 <= mean["float"] <= 1.0, f"float baseline {mean['float']}"
        assert all(d == 0 for d in dists), f"BinaryRelax distances {dists}"
        assert all(abs(a - mean["float"]) <= 0.05 for a in acc["binaryrelax"]), \
            f"BinaryRelax accuracies {acc['binaryrelax']}"
        assert mean["binaryrelax"] >= mean["binaryconnect"] - 0.005, r["detail"]


def test_c10_gradient_integrity(report):
    with report("C10 gradients vs central differences", 10) as r:
        rng = np.random.default_rng(110)
        train, _ = gen_blobs(60, 3, 3, 0.8, 4)
        mlp = make_mlp(MlpLayout(3, 5, 3, "tanh"), train)
        two = Dataset(train.features, (train.labels > 0).astype(np.int64), 2)
        logistic = make_logistic(two)
        worst = {}
        for name, oracle, tol in (("mlp", mlp, 1e-4), ("logistic", logistic, 1e-5)):
            worst[name] = 0.0
            for _ in range(20):
                x = 0.5 * rng.standard_normal(oracle.n)
                fd = central_difference(oracle.full_loss, x)
                err = np.linalg.norm(oracle.grad(x) - fd) / max(np.linalg.norm(fd), 1e-12)
                worst[name] = max(worst[name], float(err))
            assert worst[name] < tol, f"{name} relative error {worst[name]:.2e}"
        r["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def test_c11_lambda_continuation(report):
    with report("C11 lambda continuation", 1) as r:
        sched = RelaxationSchedule(1.0, 1.02, 1.0, 240)
        state = sched.initial_state()
        for _ in range(240):
            state = advance_lambda(sched, state, 1.0)
        r["detail"] = f"lambda={state.lam:.4f}"
        assert 100 < state.lam < 200 and abs(state.lam - 115.89) < 5e-3, r["detail"]
        assert sched.window_warning() is None
