"""The ten acceptance criteria, each at its stated tolerance.

Every criterion is a plain function returning (passed, detail). The pytest
wrappers assert on it, and a terminal-summary hook in conftest prints one
PASS/FAIL line per criterion. Running this file directly prints the same
lines without pytest.
"""

from __future__ import annotations

import time
from functools import lru_cache

import numpy as np
import pytest

from invprop.harness.datasets import DEFAULT_CENTERS, DEFAULT_RADIUS, gen_boxsynth, gen_jensen, gen_spiral
from invprop.invariance import NonlinearLayerIP, run_invariant_rollout
from invprop.node import MlpOde, select_params
from invprop.numerics import IntegratorConfig, dual_jacobian, integrate_step, integrate_with_hook
from invprop.qp import ActiveSetQP, QpProblem, check_kkt
from invprop.specs import (
    box_specs,
    circle_spec,
    jensen_spec,
    superellipse_spec,
    unicycle_obstacle_spec,
)
from invprop.train import TrainConfig, evaluate, train_node

from oracles import central_jacobian, enumerate_qp, random_qp, rel_err

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "spiral safety, output-layer IP",
    2: "hidden-layer IP sweep",
    3: "accuracy preservation",
    4: "Jensen invariance",
    5: "QP oracle equivalence",
    6: "derivative correctness",
    7: "Nagumo boundary property",
    8: "CLF exponential decay",
    9: "discretization convergence",
    10: "box-spec task (synthetic)",
}

SPIRAL_RK4 = dict(scheme="rk4", dt=0.025)
HIDDEN_EULER = dict(scheme="euler", dt=0.005)


def record(n, passed, detail):
    RESULTS[n] = (bool(passed), detail)
    return bool(passed), detail


@lru_cache(maxsize=None)
def spiral_setup():
    t0 = time.perf_counter()
    ds = gen_spiral()
    m = MlpOde.init([2, 50, 2], ["tanhshrink", "identity"], seed=0, cubic_lift=True)
    m = train_node(m, ds, TrainConfig(epochs=500, seed=0, scheme="rk4", eval_every=0)).model
    return ds, m, time.perf_counter() - t0


def spiral_specs(gains):
    return [circle_spec(c, DEFAULT_RADIUS, gains) for c in DEFAULT_CENTERS]


def integ(ds, scheme, dt, horizon=None):
    return IntegratorConfig(scheme, dt, float(ds.t[-1]) if horizon is None else horizon)


@lru_cache(maxsize=None)
def spiral_output_runs():
    ds, m, train_s = spiral_setup()
    specs = spiral_specs((10.0,))
    plain, _ = evaluate(m, ds, specs, "none", integ(ds, **SPIRAL_RK4))
    t0 = time.perf_counter()
    enf, res = evaluate(m, ds, specs, "linear-layer", integ(ds, **SPIRAL_RK4), select_params(m, -1, 6, seed=0))
    return plain, enf, res, train_s + time.perf_counter() - t0


@lru_cache(maxsize=None)
def spiral_hidden_runs():
    ds, m, _ = spiral_setup()
    specs = spiral_specs((20.0, 100.0))
    plain, _ = evaluate(m, ds, specs, "none", integ(ds, **HIDDEN_EULER))
    rows = {}
    for d in (6, 20, 60, 100):
        sel = select_params(m, 0, d, seed=0)
        rows[d] = evaluate(m, ds, specs, "nonlinear-layer", integ(ds, **HIDDEN_EULER), sel, eps=10.0, weights=1.0)
    return plain, rows


def criterion_1():
    plain, enf, res, secs = spiral_output_runs()
    per_spec = res.h.min(axis=0)
    ok = plain["sat_min"] < 0 and np.all(per_spec >= -1e-3) and secs <= 600
    return record(1, ok, f"plain min-h {plain['sat_min']:.4f} (<0), enforced min-h per circle "
                         f"{np.array2string(per_spec, precision=5)} (>=-1e-3), {secs:.1f}s incl. training")


def criterion_2():
    _, rows = spiral_hidden_runs()
    sats = {d: r[0]["sat_min"] for d, r in rows.items()}
    times = [rows[d][0]["qp_time_mean_us"] for d in sorted(rows)]
    mono = all(b >= a for a, b in zip(times, times[1:]))
    ok = all(s >= -1e-3 for s in sats.values()) and mono
    return record(2, ok, "min-h " + ", ".join(f"d={d}: {s:.2e}" for d, s in sats.items())
                  + "; mean QP us " + " <= ".join(f"{t:.0f}" for t in times))


def criterion_3():
    plain, enf, _, _ = spiral_output_runs()
    ratio = enf["mse"] / plain["mse"]
    hp, rows = spiral_hidden_runs()
    hidden = ", ".join(f"d={d}: {r[0]['mse'] / hp['mse']:.2f}" for d, r in rows.items())
    return record(3, ratio <= 1.5, f"output-layer IP MSE {enf['mse']:.3f} vs plain {plain['mse']:.3f} "
                                   f"(ratio {ratio:.2f} <= 1.5); hidden-layer ratios (info) {hidden}")


@lru_cache(maxsize=None)
def jensen_runs():
    ds = gen_jensen()
    spec = [jensen_spec(gains=(1.0,))]
    # 50% past the 10-unit training range, rounded up to whole steps
    cfg = IntegratorConfig("euler", ds.dt, ds.dt * np.ceil(15.0 / ds.dt))
    out = []
    for seed in range(5):
        m = MlpOde.init([3, 50, 3], ["tanh", "identity"], seed=seed)
        m = train_node(m, ds, TrainConfig(epochs=2000, seed=seed, scheme="euler", eval_every=0)).model
        plain, _ = evaluate(m, ds, spec, "none", cfg)
        enf, res = evaluate(m, ds, spec, "linear-layer", cfg, select_params(m, -1, 6, seed=seed))
        out.append((plain, enf, res))
    return out


def criterion_4():
    runs = jensen_runs()
    plain_min = [p["sat_min"] for p, _, _ in runs]
    enf_min = [e["sat_min"] for _, e, _ in runs]
    horizon = runs[0][2].trajectory.t[-1]
    ok = all(v >= -1e-6 for v in enf_min) and any(v < 0 for v in plain_min) and horizon >= 15.0 - 1e-9
    return record(4, ok, f"enforced min-h {min(enf_min):.2e} (>=-1e-6) to t={horizon:.2f}; "
                         f"plain min-h per seed {np.array2string(np.array(plain_min), precision=3)}")


def criterion_5():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, kkt_fail, mismatch = 0.0, 0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        m = int(rng.integers(0, 9))
        H, f, G, g = random_qp(rng, n, m)
        p = QpProblem(H, f, G, g)
        s = ActiveSetQP(warm_start=False).solve(p)
        ref = enumerate_qp(H, f, G, g)
        err = np.max(np.abs(s.u - ref))
        worst = max(worst, err)
        mismatch += err > 1e-6
        kkt_fail += not check_kkt(p, s).ok()
    secs = time.perf_counter() - t0
    ok = mismatch == 0 and kkt_fail == 0 and secs <= 30
    return record(5, ok, f"worst |u - u_oracle| {worst:.1e}, {mismatch} mismatches, {kkt_fail} KKT failures, "
                         f"{secs:.1f}s (oracle included)")


def criterion_6():
    rng = np.random.default_rng(6)
    worst = {}

    def upd(name, e):
        worst[name] = max(worst.get(name, 0.0), e)

    archs = [([2, 50, 2], ["tanhshrink", "identity"], True), ([3, 16, 16, 3], ["tanh", "gelu", "identity"], False)]
    uni = unicycle_obstacle_spec((1.0, 2.0), 0.5, gains=(1.0, 2.0))
    for k in range(100):
        dims, acts, lift = archs[k % 2]
        m = MlpOde.init(dims, acts, seed=k, cubic_lift=lift)
        x = rng.uniform(-1.2, 1.2, size=dims[0])
        upd("df/dx analytic", rel_err(m.jacobian_x(x), central_jacobian(m.forward, x)))
        upd("df/dx dual", rel_err(dual_jacobian(m.forward, x), central_jacobian(m.forward, x)))
        for layer in range(m.n_layers):
            count = 2 * (dims[-1] if layer == m.n_layers - 1 else m.weights[layer].shape[1])
            sel = select_params(m, layer, count, seed=k)
            th = m.get_params(sel)

            def f_theta(v, m=m, sel=sel):
                mm = m.copy()
                mm.set_params(sel, v)
                return mm.forward(x)

            upd("df/dtheta", rel_err(m.jacobian_theta(x, sel), central_jacobian(f_theta, th)))
        z = rng.uniform(-2, 2, size=3)
        specs = [circle_spec(rng.normal(size=2), 0.3), superellipse_spec(rng.normal(size=2), 0.3),
                 jensen_spec(), *box_specs(-np.ones(3), np.ones(3))[:2]]
        for s in specs:
            upd("spec grad", rel_err(s.grad(z), central_jacobian(s.h, z)))
            upd("spec hess", rel_err(s.hess(z), central_jacobian(s.grad, z)))
        y = np.array([*rng.uniform(-2, 2, 2), rng.uniform(-np.pi, np.pi), rng.uniform(0.1, 2)])
        out = uni.output_spec(y)
        u = rng.normal(size=2)
        upd("spec grad", rel_err(out.grad(u), central_jacobian(out.h, u)))
        upd("spec hess", rel_err(out.hess(u), central_jacobian(out.grad, u), floor=1.0))
    ok = all(v <= 1e-5 for v in worst.values())
    return record(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<=1e-5, 100 draws each)")


def _nagumo_violations(res):
    worst, n_checked = np.inf, 0
    for d in res.diagnostics:
        near = np.abs(d.h) <= 1e-3
        if np.any(near):
            n_checked += int(near.sum())
            worst = min(worst, float(np.min(d.psi_post[near])))
    return worst, n_checked


def criterion_7():
    _, _, out_res, _ = spiral_output_runs()
    _, hidden = spiral_hidden_runs()
    box = box_runs()
    runs = {"output": out_res, **{f"hidden{d}": r[1] for d, r in hidden.items()},
            **{f"jensen{i}": r[2] for i, r in enumerate(jensen_runs())},
            **{f"box{i}": r[1] for i, r in enumerate(box)}}
    worst, checked = np.inf, 0
    for res in runs.values():
        w, c = _nagumo_violations(res)
        worst, checked = min(worst, w), checked + c
    ok = checked > 0 and worst >= -1e-8
    return record(7, ok, f"{checked} near-boundary (|h|<=1e-3) spec-steps over {len(runs)} enforced rollouts, "
                         f"min post-QP psi {worst:.2e} (>=-1e-8)")


def _clf_run(w):
    ds, m0, _ = spiral_setup()
    m = m0.copy()
    sel = select_params(m, 0, 20, seed=3)
    eng = NonlinearLayerIP(m, sel, [], dt=0.005, eps=10.0, weights=w)
    rng = np.random.default_rng(8)
    eng.aux.theta = eng.aux.anchor + rng.uniform(-0.05, 0.05, size=sel.size)
    m.set_params(sel, eng.aux.theta)
    cfg = IntegratorConfig("euler", 0.005, 5.0)
    integrate_with_hook(eng.field, ds.trajectories[0][0], cfg, eng.hook)
    V = np.array([(th - eng.aux.anchor) ** 2 for th in eng.theta_history])
    t = cfg.grid()[: V.shape[0]]
    bound = V[0] * np.exp(-10.0 * t)[:, None] + 1e-6
    return float(np.max(V - bound)), t[-1]


def criterion_8():
    excess, t_end = _clf_run(1e6)
    excess_w1, _ = _clf_run(1.0)
    ok = excess <= 0 and t_end >= 5.0 - 0.005 - 1e-9
    return record(8, ok, f"slack weight 1e6: max(V - V0 e^(-eps t) - 1e-6) = {excess:.2e} over t<= {t_end:.3f} "
                         f"(<=0); with weight 1 the same margin is {excess_w1:.2e} (slack lets decay lag)")


def _undershoot_series(gains, dts):
    ds, m0, _ = spiral_setup()
    specs = spiral_specs(gains)
    sel = select_params(m0, -1, 6, seed=0)
    out = []
    for dt in dts:
        res = run_invariant_rollout(m0, "linear-layer", specs, ds.trajectories[0][0], integ(ds, "rk4", dt), sel)
        m = m0.copy()
        worst = res.sat_min
        # also look between samples: hold each step's weights and sub-step finely
        for k, th in enumerate(res.engine.theta_history):
            m.set_params(sel, th)
            x = res.trajectory.states[k]
            for _ in range(8):
                x = integrate_step(m.forward, x, dt / 8, "rk4")
                worst = min(worst, min(s.h(x) for s in specs))
        out.append(max(0.0, -worst))
    return out


def criterion_9():
    dts = (0.05, 0.025, 0.0125)
    u = _undershoot_series((10.0,), dts)
    ok = all(b <= a / 2 for a, b in zip(u, u[1:]))
    stress = _undershoot_series((100.0,), (0.025, 0.0125, 0.00625))
    return record(9, ok, "undershoot at k=10 for dt " + ", ".join(f"{d}: {v:.2e}" for d, v in zip(dts, u))
                  + " (zero at every dt, so the halving holds trivially); stress k=100 for dt 0.025/0.0125/0.00625: "
                  + ", ".join(f"{v:.2e}" for v in stress))


@lru_cache(maxsize=None)
def box_model():
    ds = gen_boxsynth()
    m = MlpOde.init([17, 64, 17], ["tanh", "identity"], seed=0)
    return ds, train_node(m, ds, TrainConfig(epochs=1500, seed=0, scheme="rk4", eval_every=0)).model


@lru_cache(maxsize=None)
def box_runs():
    ds, m = box_model()
    lo, hi = np.array(ds.provenance["lower"]), np.array(ds.provenance["upper"])
    specs = box_specs(lo, hi, (5.0,))
    cfg = IntegratorConfig("euler", ds.dt, 20.0)
    rng = np.random.default_rng(7)
    out = []
    for _ in range(5):
        corner = np.where(rng.choice([-1, 1], size=17) > 0, hi, lo)
        x0 = 0.5 * (lo + hi) + 0.9 * (corner - 0.5 * (lo + hi))
        plain, _ = evaluate(m, ds, specs, "none", cfg, x0=x0)
        enf, res = evaluate(m, ds, specs, "linear-layer", cfg, select_params(m, -1, 17, seed=0), x0=x0)
        out.append((plain, res, enf))
    return out


def criterion_10():
    runs = box_runs()
    plain = [p["sat_min"] for p, _, _ in runs]
    enf = [e["sat_min"] for _, _, e in runs]
    ok = len(box_specs(*[np.array(v) for v in (gen_boxsynth().provenance["lower"],
                                                gen_boxsynth().provenance["upper"])])) == 34
    ok = ok and min(enf) >= -1e-3 and any(v < 0 for v in plain)
    return record(10, ok, f"34 specs; enforced min-h {min(enf):.2e} (>=-1e-3); plain min-h from 5 corner starts "
                          f"{np.array2string(np.array(plain), precision=2)}")


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 11)}


@pytest.mark.acceptance
@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    passed, detail = CRITERIA[n]()
    assert passed, f"criterion {n} ({TITLES[n]}): {detail}"


def summary_lines():
    return [f"criterion {n:2d} {'PASS' if RESULTS[n][0] else 'FAIL'}  {TITLES[n]}: {RESULTS[n][1]}"
            for n in sorted(RESULTS)]


if __name__ == "__main__":
    for n, fn in CRITERIA.items():
        try:
            fn()
        except Exception as exc:  # noqa: BLE001
            record(n, False, f"raised {exc!r}")
    print("\n".join(summary_lines()))
