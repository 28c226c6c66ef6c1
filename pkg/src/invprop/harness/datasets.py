"""Dataset generators: spiral (optionally obstacle-avoiding), Jensen, synthetic box task."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..numerics import integrate_step
from ..qp import ActiveSetQP, QpProblem
from ..specs import circle_spec

SPIRAL_A = np.array([[-0.1, -2.0], [2.0, -0.1]])
SPIRAL_X0 = np.array([2.0, 0.0])
DEFAULT_CENTERS = ((1.0, 0.55), (-1.2, -0.6))
DEFAULT_RADIUS = 0.2


class GenerationError(RuntimeError):
    pass


@dataclass
class Dataset:
    """Trajectories on a shared uniform grid plus how they were made."""

    t: np.ndarray
    trajectories: list[np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        steps = np.diff(self.t)
        if steps.size and not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("dataset time grid must be uniform")
        for tr in self.trajectories:
            if tr.shape[0] != self.t.shape[0]:
                raise ValueError("trajectory length does not match the time grid")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def dim(self) -> int:
        return self.trajectories[0].shape[1]

    def save(self, path) -> None:
        np.savez(
            path,
            t=self.t,
            states=np.stack(self.trajectories),
            provenance=np.array(json.dumps(self.provenance)),
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["t"], list(z["states"]), json.loads(str(z["provenance"])))


def spiral_field(a01: float = SPIRAL_A[0, 1], a10: float = SPIRAL_A[1, 0]):
    A = SPIRAL_A.copy()
    A[0, 1], A[1, 0] = a01, a10
    return lambda x: A @ (x**3)


def _avoid_qp(x, specs, solver):
    """Minimally change A[0,1], A[1,0] so that dh/dx f + h >= 0 for every circle."""
    cx, cy = x**3
    a_nom = np.array([SPIRAL_A[0, 1], SPIRAL_A[1, 0]])
    G = np.zeros((len(specs), 2))
    g = np.zeros(len(specs))
    for i, s in enumerate(specs):
        dh = s.grad(x)
        # dh . f = dh0 (-0.1 cx + a1 cy) + dh1 (a2 cx - 0.1 cy)
        G[i] = -np.array([dh[0] * cy, dh[1] * cx])
        g[i] = dh[0] * (SPIRAL_A[0, 0] * cx) + dh[1] * (SPIRAL_A[1, 1] * cy) + s.h(x)
    sol = solver.solve(QpProblem(2.0 * np.eye(2), -2.0 * a_nom, G, g))
    if not sol.optimal:
        raise GenerationError(f"obstacle-avoidance QP infeasible at x={x}")
    return sol.u


def gen_spiral(
    seed: int = 0,
    constrained: bool = False,
    n_points: int = 1000,
    dt: float = 0.025,
    substeps: int = 10,
    centers=DEFAULT_CENTERS,
    radius: float = DEFAULT_RADIUS,
) -> Dataset:
    """Samples of [x', y'] = A [x^3, y^3] from [2, 0] on t = 0, dt, ..., (n-1) dt.

    With ``constrained`` the two off-diagonal entries of A are re-chosen by a
    small QP before every substep so the samples stay outside both circles.
    """
    t = dt * np.arange(n_points)
    h = dt / substeps
    x = SPIRAL_X0.copy()
    out = np.empty((n_points, 2))
    out[0] = x
    specs = [circle_spec(c, radius, (1.0,)) for c in centers] if constrained else []
    solver = ActiveSetQP()
    for k in range(1, n_points):
        for _ in range(substeps):
            if constrained:
                a1, a2 = _avoid_qp(x, specs, solver)
                fn = spiral_field(a1, a2)
                x = integrate_step(fn, x, h, "euler")
            else:
                x = integrate_step(spiral_field(), x, h, "rk4")
        out[k] = x
    if constrained:
        worst = min(s.h(p) for s in specs for p in out)
        if worst < 0:
            raise GenerationError(f"constrained samples enter an obstacle (min h = {worst})")
    prov = {
        "generator": "spiral",
        "seed": seed,
        "constrained": constrained,
        "n_points": n_points,
        "dt": dt,
        "substeps": substeps,
        "centers": [list(map(float, c)) for c in centers] if constrained else None,
        "radius": radius if constrained else None,
        "A": SPIRAL_A.tolist(),
        "x0": SPIRAL_X0.tolist(),
    }
    return Dataset(t, [out], prov)


def jensen_targets(t, mu1: float = 0.5, mu2: float = 0.5):
    x = np.asarray(t, dtype=float)
    y = x + 2.0 - (1.9 / 10.0) * x
    g = np.square
    return np.stack([g(x), g(y), g(mu1 * x + mu2 * y)], axis=1)


def gen_jensen(seed: int = 0, n_points: int = 100, t_end: float = 10.0) -> Dataset:
    """(g(x), g(y), g((x + y)/2)) with g = t^2, x = t, y = t + 2 - 0.19 t."""
    t = np.linspace(0.0, t_end, n_points)
    prov = {"generator": "jensen", "seed": seed, "n_points": n_points, "t_end": t_end,
            "mu": [0.5, 0.5], "g": "t^2"}
    return Dataset(t, [jensen_targets(t)], prov)


def boxsynth_matrix(seed: int, dim: int = 17, damping=(0.05, 0.3)) -> np.ndarray:
    """S - D with S skew-symmetric and D positive diagonal; x'x never grows."""
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(dim, dim))
    S = 0.5 * (R - R.T)
    D = np.diag(rng.uniform(*damping, size=dim))
    return S - D


def gen_boxsynth(
    seed: int = 0, dim: int = 17, n_traj: int = 6, n_points: int = 200, dt: float = 0.05
) -> Dataset:
    """SYNTHETIC damped coupled oscillators; box bounds are the observed ranges.

    Initial states are scaled to unit energy x'x = 1 and the flow is
    dissipative, so every trajectory stays in the unit ball.
    """
    M = boxsynth_matrix(seed, dim)
    rng = np.random.default_rng(seed + 1)
    fn = lambda x: M @ x  # noqa: E731
    trajs = []
    t = dt * np.arange(n_points)
    for _ in range(n_traj):
        x = rng.normal(size=dim)
        x /= np.linalg.norm(x)
        out = np.empty((n_points, dim))
        out[0] = x
        for k in range(1, n_points):
            for _ in range(5):
                x = integrate_step(fn, x, dt / 5, "rk4")
            out[k] = x
        trajs.append(out)
    stacked = np.concatenate(trajs)
    prov = {
        "generator": "boxsynth",
        "label": "SYNTHETIC",
        "seed": seed,
        "dim": dim,
        "n_traj": n_traj,
        "n_points": n_points,
        "dt": dt,
        "lower": stacked.min(axis=0).tolist(),
        "upper": stacked.max(axis=0).tolist(),
    }
    return Dataset(t, trajs, prov)


GENERATORS = {"spiral": gen_spiral, "jensen": gen_jensen, "boxsynth": gen_boxsynth}
