"""Output specifications h(x) >= 0 and class-K gain chains."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp


@dataclass(frozen=True)
class ClassK:
    """Linear class-K function alpha(s) = gain * s."""

    gain: float

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("class-K gain must be positive")

    def __call__(self, s):
        return self.gain * s

    def derivative(self, s=None) -> float:
        return self.gain


@dataclass
class Specification:
    h: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    chain: list[ClassK] = field(default_factory=list)
    label: str = "h"

    def with_gains(self, gains: Sequence[float]) -> "Specification":
        return Specification(self.h, self.grad, self.hess, [ClassK(g) for g in gains], self.label)

    def alpha(self, i: int) -> ClassK:
        """The i-th class-K function (1-based, matching alpha_1, alpha_2)."""
        if not 1 <= i <= len(self.chain):
            raise ValueError(f"{self.label}: chain has {len(self.chain)} class-K functions, need {i}")
        return self.chain[i - 1]

    @property
    def gains(self) -> list[float]:
        return [a.gain for a in self.chain]


def circle_spec(center, radius: float, gains: Sequence[float] = (), label: str | None = None):
    """Keep out of a disc: (x-cx)^2 + (y-cy)^2 - R^2 >= 0."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=float)
    r2 = float(radius) ** 2

    def h(x):
        d = np.asarray(x, dtype=float)[:2] - c
        return float(d @ d - r2)

    def grad(x):
        g = np.zeros(np.size(x))
        g[:2] = 2.0 * (np.asarray(x, dtype=float)[:2] - c)
        return g

    def hess(x):
        H = np.zeros((np.size(x), np.size(x)))
        H[0, 0] = H[1, 1] = 2.0
        return H

    return Specification(h, grad, hess, [ClassK(g) for g in gains], label or f"circle({c[0]:g}, {c[1]:g})")


def superellipse_spec(center, radius: float, gains: Sequence[float] = (), label: str | None = None):
    """Keep out of a quartic blob: (x-cx)^4 + (y-cy)^4 - R^4 >= 0."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=float)
    r4 = float(radius) ** 4

    def h(x):
        d = np.asarray(x, dtype=float)[:2] - c
        return float(np.sum(d**4) - r4)

    def grad(x):
        g = np.zeros(np.size(x))
        g[:2] = 4.0 * (np.asarray(x, dtype=float)[:2] - c) ** 3
        return g

    def hess(x):
        H = np.zeros((np.size(x), np.size(x)))
        d = np.asarray(x, dtype=float)[:2] - c
        H[0, 0], H[1, 1] = 12.0 * d**2
        return H

    return Specification(h, grad, hess, [ClassK(g) for g in gains], label or f"superellipse({c[0]:g}, {c[1]:g})")


def _linear_spec(a, c0: float, gains, label):
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    return Specification(
        lambda x: float(a @ np.asarray(x, dtype=float) + c0),
        lambda x: a.copy(),
        lambda x: np.zeros((n, n)),
        [ClassK(g) for g in gains],
        label,
    )


def box_specs(lower, upper, gains: Sequence[float] = ()) -> list[Specification]:
    """2n half-space specs x_i - l_i >= 0 and u_i - x_i >= 0."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape:
        raise ValueError("bounds must have the same shape")
    if np.any(lower >= upper):
        raise ValueError("lower bounds must be strictly below upper bounds")
    n = lower.shape[0]
    specs = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        specs.append(_linear_spec(e, -lower[i], gains, f"x{i}>=lo"))
        specs.append(_linear_spec(-e, upper[i], gains, f"x{i}<=hi"))
    return specs


def jensen_spec(mu1: float = 0.5, mu2: float = 0.5, gains: Sequence[float] = ()) -> Specification:
    """mu1 z1 + mu2 z2 - z3 >= 0 on a state (z1, z2, z3) = (g(x), g(y), g(mu1 x + mu2 y))."""
    if not (0.0 <= mu1 <= 1.0 and 0.0 <= mu2 <= 1.0) or abs(mu1 + mu2 - 1.0) > 1e-12:
        raise ValueError("Jensen weights must lie in [0, 1] and sum to 1")
    return _linear_spec([mu1, mu2, -1.0], 0.0, gains, "jensen")


class RelativeDegreeError(ValueError):
    pass


@dataclass
class DerivedControlSpec:
    """State constraint b(y) >= 0 of a plant y' = f(y, u) driven by the ODE output u.

    Built from sympy expressions; ``phi`` holds phi_0 .. phi_{d-1} with
    phi_0 = b and phi_k = dphi_{k-1}/dt + alpha_k(phi_{k-1}).
    """

    y: Sequence[sp.Symbol]
    u: Sequence[sp.Symbol]
    dynamics: Sequence[sp.Expr]
    barrier: sp.Expr
    relative_degree: int
    gains: Sequence[float]
    label: str = "derived"
    phi: list[sp.Expr] = field(init=False)
    constraint: sp.Expr = field(init=False)

    def __post_init__(self):
        d = int(self.relative_degree)
        if d < 1:
            raise RelativeDegreeError("relative degree must be at least 1")
        if len(self.gains) != d:
            raise ValueError(f"need {d} class-K gains, got {len(self.gains)}")
        for g in self.gains:
            ClassK(g)
        y = sp.Matrix(self.y)
        f = sp.Matrix(self.dynamics)
        phi = [sp.sympify(self.barrier)]
        for k in range(1, d):
            lie = (sp.Matrix([phi[-1]]).jacobian(y) @ f)[0]
            if any(sp.simplify(sp.diff(lie, ui)) != 0 for ui in self.u):
                raise RelativeDegreeError(f"control appears at level {k} < {d}")
            phi.append(sp.expand(lie + self.gains[k - 1] * phi[-1]))
        top = sp.expand((sp.Matrix([phi[-1]]).jacobian(y) @ f)[0] + self.gains[d - 1] * phi[-1])
        if all(sp.simplify(sp.diff(top, ui)) == 0 for ui in self.u):
            raise RelativeDegreeError(f"control does not appear at level {d}")
        self.phi = phi
        self.constraint = top
        args = (tuple(self.u), tuple(self.y))
        self._phi_fns = [sp.lambdify([tuple(self.y)], p, "numpy") for p in phi]
        self._h_fn = sp.lambdify(args, top, "numpy")
        self._grad_fn = sp.lambdify(args, sp.Matrix([top]).jacobian(sp.Matrix(self.u)), "numpy")
        self._hess_fn = sp.lambdify(args, sp.hessian(top, tuple(self.u)), "numpy")

    def h(self, u, y) -> float:
        return float(self._h_fn(tuple(np.asarray(u, float)), tuple(np.asarray(y, float))))

    def output_spec(self, y, gains: Sequence[float] = ()) -> Specification:
        """Specification over the ODE output u with the plant frozen at ``y``."""
        y = tuple(np.asarray(y, dtype=float))
        return Specification(
            lambda u: float(self._h_fn(tuple(np.asarray(u, float)), y)),
            lambda u: np.asarray(self._grad_fn(tuple(np.asarray(u, float)), y), float).reshape(-1),
            lambda u: np.asarray(self._hess_fn(tuple(np.asarray(u, float)), y), float),
            [ClassK(g) for g in gains],
            self.label,
        )


def hocbf_chain(spec: DerivedControlSpec, y):
    """phi_0..phi_{d-1} at plant state ``y`` and the output constraint h(., y)."""
    yt = tuple(np.asarray(y, dtype=float))
    values = np.array([float(fn(yt)) for fn in spec._phi_fns])
    return values, spec.output_spec(y)


def double_integrator_spec(gains=(1.0, 1.0)) -> DerivedControlSpec:
    """Position barrier b = p >= 0 for p'' = u."""
    p, v, u = sp.symbols("p v u", real=True)
    return DerivedControlSpec((p, v), (u,), (v, u), p, 2, gains, "double-integrator")


def unicycle_obstacle_spec(obstacle, radius: float, offset: float = 0.0, gains=(1.0, 1.0)):
    """(x - x_p)^2 + (y - (y_p + y_d))^2 - R^2 >= 0 for a unicycle with speed state.

    Plant state (x, y, heading, speed), control (turn rate, acceleration).
    """
    x, y, th, v, w, a = sp.symbols("x y theta v omega a", real=True)
    xp, yp = (float(c) for c in obstacle)
    b = (x - xp) ** 2 + (y - (yp + offset)) ** 2 - float(radius) ** 2
    return DerivedControlSpec(
        (x, y, th, v), (w, a), (v * sp.cos(th), v * sp.sin(th), w, a), b, 2, gains, "unicycle"
    )


def spec_from_config(cfg: dict) -> list[Specification]:
    """Build specs from a config block {type, parameters..., gains}."""
    kind = cfg["type"]
    gains = cfg.get("gains", [])
    if kind == "circle":
        return [circle_spec(cfg["center"], cfg["radius"], gains)]
    if kind == "superellipse":
        return [superellipse_spec(cfg["center"], cfg["radius"], gains)]
    if kind == "box":
        return box_specs(cfg["lower"], cfg["upper"], gains)
    if kind == "jensen":
        return [jensen_spec(cfg.get("mu1", 0.5), cfg.get("mu2", 0.5), gains)]
    if kind == "derived":
        plant = cfg["plant"]
        if plant == "double_integrator":
            d = double_integrator_spec(cfg.get("plant_gains", (1.0, 1.0)))
        elif plant == "unicycle":
            d = unicycle_obstacle_spec(
                cfg["obstacle"], cfg["radius"], cfg.get("offset", 0.0), cfg.get("plant_gains", (1.0, 1.0))
            )
        else:
            raise ValueError(f"unknown plant {plant!r}")
        return [d.output_spec(cfg["plant_state"], gains)]
    raise ValueError(f"unknown spec type {kind!r}")
